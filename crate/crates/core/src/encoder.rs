//! Clip encoder: a two-layer per-frame network followed by a gated recurrent
//! cell run over a short clip. The hidden state after the clip's last frame is
//! the frame feature (`c_t` for the live branch, `l_t` for the memory bank).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{Backend, Eval};
use crate::error::{Error, Result};
use crate::params::{uniform_fan_in, xavier_normal, Group, ParamId, ParamStore};
use crate::synth::LabeledSequence;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub d_raw: usize,
    pub d: usize,
    pub frame_w1: ParamId,
    pub frame_b1: ParamId,
    pub frame_w2: ParamId,
    pub frame_b2: ParamId,
    /// Input-to-gates weights `[d x 4d]`, gate order input, forget, candidate, output.
    pub cell_wx: ParamId,
    pub cell_wh: ParamId,
    pub cell_b: ParamId,
}

impl EncoderParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        d_raw: usize,
        d: usize,
        rng: &mut R,
    ) -> Self {
        let frame_w1 = store.add(
            "frame.w1",
            Group::Frame,
            uniform_fan_in(&[d_raw, d], d_raw, rng),
        );
        let frame_b1 = store.add("frame.b1", Group::Frame, Tensor::zeros(&[d]));
        let frame_w2 = store.add("frame.w2", Group::Frame, uniform_fan_in(&[d, d], d, rng));
        let frame_b2 = store.add("frame.b2", Group::Frame, Tensor::zeros(&[d]));
        let cell_wx = store.add(
            "cell.wx",
            Group::Recurrent,
            xavier_normal(&[d, 4 * d], d, d, rng),
        );
        let cell_wh = store.add(
            "cell.wh",
            Group::Recurrent,
            xavier_normal(&[d, 4 * d], d, d, rng),
        );
        let mut bias = Tensor::zeros(&[4 * d]);
        bias.data_mut()[d..2 * d].fill(1.0);
        let cell_b = store.add("cell.b", Group::Recurrent, bias);
        EncoderParams {
            d_raw,
            d,
            frame_w1,
            frame_b1,
            frame_w2,
            frame_b2,
            cell_wx,
            cell_wh,
            cell_b,
        }
    }
}

/// Contiguous frames `x_{t-n} .. x_t`, truncated at the start of the video.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub frames: Tensor,
    pub end_time: usize,
}

impl Clip {
    pub fn from_sequence(seq: &LabeledSequence, t: usize, clip_len: usize) -> Result<Self> {
        if t >= seq.len() {
            return Err(Error::Index {
                what: "clip end time",
                index: t,
                len: seq.len(),
            });
        }
        if clip_len == 0 {
            return Err(Error::Contract("clip length must be >= 1".into()));
        }
        let start = (t + 1).saturating_sub(clip_len);
        let frames = crate::ops::slice_rows(&seq.features, start, t + 1)?;
        Ok(Clip {
            frames,
            end_time: t,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Encodes a batch of clips into a `[clips.len() x d]` matrix.
///
/// Clips are right-aligned on a shared step axis; a shorter clip's state stays
/// at zero until its first frame arrives, which is exactly the state it would
/// have if encoded on its own.
pub fn encode_clips<B: Backend>(b: &mut B, p: &EncoderParams, clips: &[&Tensor]) -> Result<B::T> {
    if clips.is_empty() {
        return Err(Error::Contract("encode_clips needs at least one clip".into()));
    }
    let n = clips.len();
    let d = p.d;
    let steps = clips.iter().map(|c| c.rows()).max().unwrap_or(0);
    for c in clips {
        if c.ndim() != 2 || c.cols() != p.d_raw {
            return Err(Error::dim("encode_clips", c.shape(), &[c.rows(), p.d_raw]));
        }
    }

    let mut x = vec![0.0; steps * n * p.d_raw];
    let mut active = vec![vec![false; n]; steps];
    for (i, c) in clips.iter().enumerate() {
        let offset = steps - c.rows();
        for r in 0..c.rows() {
            let row = (offset + r) * n + i;
            x[row * p.d_raw..(row + 1) * p.d_raw].copy_from_slice(c.row(r));
            active[offset + r][i] = true;
        }
    }
    let x = b.constant(Tensor::matrix(steps * n, p.d_raw, x)?);
    let h1 = b.linear(&x, p.frame_w1, Some(p.frame_b1))?;
    let h1 = b.relu(&h1);
    let feats = b.linear(&h1, p.frame_w2, Some(p.frame_b2))?;
    let feats = b.relu(&feats);

    let wx = b.param(p.cell_wx);
    let wh = b.param(p.cell_wh);
    let bias = b.param(p.cell_b);
    let mut h = b.constant(Tensor::zeros(&[n, d]));
    let mut c = b.constant(Tensor::zeros(&[n, d]));
    for (s, mask) in active.iter().enumerate() {
        let xs = b.slice_rows(&feats, s * n, (s + 1) * n)?;
        let gx = b.matmul(&xs, &wx)?;
        let gh = b.matmul(&h, &wh)?;
        let gates = b.add(&gx, &gh)?;
        let gates = b.add_bias(&gates, &bias)?;
        let gi = b.slice_cols(&gates, 0, d)?;
        let gf = b.slice_cols(&gates, d, 2 * d)?;
        let gg = b.slice_cols(&gates, 2 * d, 3 * d)?;
        let go = b.slice_cols(&gates, 3 * d, 4 * d)?;
        let i_gate = b.sigmoid(&gi);
        let f_gate = b.sigmoid(&gf);
        let cand = b.tanh(&gg);
        let o_gate = b.sigmoid(&go);
        let keep = b.mul(&f_gate, &c)?;
        let write = b.mul(&i_gate, &cand)?;
        let c_new = b.add(&keep, &write)?;
        let c_act = b.tanh(&c_new);
        let h_new = b.mul(&o_gate, &c_act)?;
        if mask.iter().all(|&m| m) {
            c = c_new;
            h = h_new;
        } else {
            c = b.row_select(mask, &c_new, &c)?;
            h = b.row_select(mask, &h_new, &h)?;
        }
    }
    Ok(h)
}

/// Encodes one clip into a `[1 x d]` feature.
pub fn encode_clip<B: Backend>(b: &mut B, p: &EncoderParams, clip: &Clip) -> Result<B::T> {
    if clip.is_empty() {
        return Err(Error::Contract("cannot encode an empty clip".into()));
    }
    encode_clips(b, p, &[&clip.frames])
}

const SEQUENCE_CHUNK: usize = 256;

/// Row `t` is the encoding of the clip ending at frame `t`. All clips are
/// encoded in one batched recurrent pass per chunk of frames.
pub fn encode_sequence(
    store: &ParamStore,
    p: &EncoderParams,
    seq: &LabeledSequence,
    clip_len: usize,
) -> Result<Tensor> {
    if clip_len == 0 {
        return Err(Error::Contract("clip length must be >= 1".into()));
    }
    let mut eval = Eval::new(store);
    let mut out = Vec::with_capacity(seq.len() * p.d);
    let mut t0 = 0;
    while t0 < seq.len() {
        let t1 = (t0 + SEQUENCE_CHUNK).min(seq.len());
        let clips: Vec<Tensor> = (t0..t1)
            .map(|t| Clip::from_sequence(seq, t, clip_len).map(|c| c.frames))
            .collect::<Result<_>>()?;
        let refs: Vec<&Tensor> = clips.iter().collect();
        out.extend_from_slice(encode_clips(&mut eval, p, &refs)?.data());
        t0 = t1;
    }
    Tensor::matrix(seq.len(), p.d, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SchemaConfig, WorkflowSchema};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(d: usize) -> (ParamStore, EncoderParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = EncoderParams::init(&mut store, 16, d, &mut rng);
        (store, p)
    }

    fn seq(seed: u64, len: (usize, usize)) -> LabeledSequence {
        let s = WorkflowSchema::from_config(&SchemaConfig::default()).unwrap();
        generate(&s, seed, len).unwrap()
    }

    #[test]
    fn output_is_one_row_of_width_d() {
        let (store, p) = setup(8);
        let q = seq(0, (40, 60));
        let clip = Clip::from_sequence(&q, 20, 10).unwrap();
        let out = encode_clip(&mut Eval::new(&store), &p, &clip).unwrap();
        assert_eq!(out.shape(), &[1, 8]);
    }

    #[test]
    fn zero_parameters_give_zero_features() {
        let (mut store, p) = setup(6);
        for id in store.ids().collect::<Vec<_>>() {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = Tensor::zeros(&shape);
        }
        let q = seq(2, (40, 60));
        let clip = Clip::from_sequence(&q, 15, 10).unwrap();
        let out = encode_clip(&mut Eval::new(&store), &p, &clip).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn clip_order_matters() {
        let (store, p) = setup(8);
        let q = seq(3, (40, 60));
        let clip = Clip::from_sequence(&q, 30, 10).unwrap();
        let mut rows: Vec<Vec<f64>> = (0..clip.len()).map(|r| clip.frames.row(r).to_vec()).collect();
        rows.swap(0, 5);
        let permuted = Clip {
            frames: Tensor::from_rows(&rows).unwrap(),
            end_time: 30,
        };
        let mut e = Eval::new(&store);
        let a = encode_clip(&mut e, &p, &clip).unwrap();
        let b = encode_clip(&mut e, &p, &permuted).unwrap();
        assert!(a.max_abs_diff(&b) > 1e-6);
    }

    #[test]
    fn empty_clip_is_a_contract_error() {
        let (store, p) = setup(4);
        assert!(matches!(
            encode_clips(&mut Eval::new(&store), &p, &[]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn sequence_rows_match_per_clip_encoding() {
        let (store, p) = setup(8);
        for s in 0..5 {
            let q = seq(10 + s, (30, 300));
            let all = encode_sequence(&store, &p, &q, 10).unwrap();
            assert_eq!(all.shape(), &[q.len(), 8]);
            let mut e = Eval::new(&store);
            for t in 0..q.len() {
                let clip = Clip::from_sequence(&q, t, 10).unwrap();
                let one = encode_clip(&mut e, &p, &clip).unwrap();
                for (a, b) in one.data().iter().zip(all.row(t)) {
                    assert!((a - b).abs() <= 1e-9);
                }
            }
        }
    }

    #[test]
    fn single_frame_sequence() {
        let (store, p) = setup(4);
        let q = seq(4, (40, 60));
        let one = LabeledSequence::from_parts(
            crate::ops::slice_rows(&q.features, 0, 1).unwrap(),
            vec![q.labels[0]],
            q.num_phases,
            0,
        )
        .unwrap();
        let all = encode_sequence(&store, &p, &one, 10).unwrap();
        let clip = Clip::from_sequence(&one, 0, 10).unwrap();
        let direct = encode_clip(&mut Eval::new(&store), &p, &clip).unwrap();
        assert_eq!(all, direct);
        assert_eq!(all, encode_sequence(&store, &p, &one, 10).unwrap());
    }
}
