//! Frame-at-a-time inference with a sliding clip buffer and a live bank.

use std::collections::VecDeque;
use std::io::{self, BufRead, Read, Write};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backend::Eval;
use crate::bank::MemoryBank;
use crate::encoder::{encode_clips, encode_sequence};
use crate::error::{Error, Result};
use crate::model::{predict_frame, Model};
use crate::synth::LabeledSequence;
use crate::tensor::{argmax, Tensor};

/// Output of one [`Session::step`].
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub t: usize,
    pub phase: usize,
    pub probs: Vec<f64>,
    /// Attention over the bank window, one row per operator, when the model
    /// reads the bank.
    pub attention: Option<Tensor>,
    pub latency_us: f64,
}

/// One live stream. The model is shared read-only.
pub struct Session<'m> {
    model: &'m Model,
    bank: MemoryBank,
    buffer: VecDeque<Vec<f64>>,
    t: usize,
    latencies_us: Vec<f64>,
}

impl<'m> Session<'m> {
    pub fn new(model: &'m Model) -> Self {
        Session {
            model,
            bank: MemoryBank::new(model.config.d),
            buffer: VecDeque::with_capacity(model.config.clip_len),
            t: 0,
            latencies_us: Vec::new(),
        }
    }

    /// Frames processed so far.
    pub fn time(&self) -> usize {
        self.t
    }

    pub fn bank(&self) -> &MemoryBank {
        &self.bank
    }

    pub fn latencies_us(&self) -> &[f64] {
        &self.latencies_us
    }

    pub fn step(&mut self, frame: &[f64]) -> Result<StepOutput> {
        let cfg = &self.model.config;
        if frame.len() != cfg.d_raw {
            return Err(Error::dim("stream step", &[cfg.d_raw], &[frame.len()]));
        }
        let start = Instant::now();
        if self.buffer.len() == cfg.clip_len {
            self.buffer.pop_front();
        }
        self.buffer.push_back(frame.to_vec());
        let rows: Vec<Vec<f64>> = self.buffer.iter().cloned().collect();
        let clip = Tensor::from_rows(&rows)?;
        let c = encode_clips(&mut Eval::new(&self.model.store), &self.model.encoder, &[&clip])?;
        // the same feature serves as c_t and is archived as l_t
        self.bank.append(c.data())?;
        let window = if self.model.uses_bank() {
            Some(self.bank.window(self.t, cfg.bank_len)?)
        } else {
            None
        };
        let (probs, attention) = predict_frame(self.model, &c, window.as_ref())?;
        let latency_us = start.elapsed().as_secs_f64() * 1e6;
        self.latencies_us.push(latency_us);
        let out = StepOutput {
            t: self.t,
            phase: argmax(probs.data()),
            probs: probs.into_data(),
            attention,
            latency_us,
        };
        self.t += 1;
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub frames: usize,
    pub mean_us: f64,
    pub p95_us: f64,
    pub max_us: f64,
}

impl LatencyStats {
    pub fn from_samples(samples: &[f64]) -> Self {
        if samples.is_empty() {
            return LatencyStats {
                frames: 0,
                mean_us: 0.0,
                p95_us: 0.0,
                max_us: 0.0,
            };
        }
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        let idx = ((0.95 * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1;
        LatencyStats {
            frames: samples.len(),
            mean_us: samples.iter().sum::<f64>() / samples.len() as f64,
            p95_us: sorted[idx],
            max_us: sorted[sorted.len() - 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoRun {
    pub predictions: Vec<usize>,
    /// `[T x C]` per-frame probabilities.
    pub probs: Tensor,
    pub latency: LatencyStats,
}

/// Streams every frame of `seq` through a fresh session.
pub fn run_video(model: &Model, seq: &LabeledSequence) -> Result<VideoRun> {
    let mut session = Session::new(model);
    let mut predictions = Vec::with_capacity(seq.len());
    let mut probs = Vec::with_capacity(seq.len() * model.config.num_phases);
    for t in 0..seq.len() {
        let out = session.step(seq.frame(t))?;
        predictions.push(out.phase);
        probs.extend(out.probs);
    }
    Ok(VideoRun {
        predictions,
        probs: Tensor::matrix(seq.len(), model.config.num_phases, probs)?,
        latency: LatencyStats::from_samples(session.latencies_us()),
    })
}

/// Batch inference: encodes the whole video into a frozen bank first, then
/// classifies every frame against it. Returns `[T x C]` probabilities.
pub fn offline_probs(model: &Model, seq: &LabeledSequence) -> Result<Tensor> {
    let feats = encode_sequence(&model.store, &model.encoder, seq, model.config.clip_len)?;
    let bank = MemoryBank::from_features(&feats, true)?;
    let mut out = Vec::with_capacity(seq.len() * model.config.num_phases);
    for t in 0..seq.len() {
        let c = Tensor::matrix(1, model.config.d, bank.feature(t).to_vec())?;
        let window = if model.uses_bank() {
            Some(bank.window(t, model.config.bank_len)?)
        } else {
            None
        };
        let (probs, _) = predict_frame(model, &c, window.as_ref())?;
        out.extend_from_slice(probs.data());
    }
    Tensor::matrix(seq.len(), model.config.num_phases, out)
}

/// Per-frame argmax labels of `[T x C]` probabilities.
pub fn argmax_labels(probs: &Tensor) -> Vec<usize> {
    (0..probs.rows()).map(|t| argmax(probs.row(t))).collect()
}

/// Writes one input record: `u32` LE value count, then that many `f64` LE.
pub fn write_frame_record(w: &mut impl Write, frame: &[f64]) -> Result<()> {
    let count = u32::try_from(frame.len())
        .map_err(|_| Error::Format("frame too wide for a record".into()))?;
    w.write_all(&count.to_le_bytes())?;
    for v in frame {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Reads one input record; `None` on a clean end of stream.
pub fn read_frame_record(r: &mut impl Read) -> Result<Option<Vec<f64>>> {
    let mut len = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut len[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(Error::Format("truncated record length".into())),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let n = u32::from_le_bytes(len) as usize;
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => Error::Format("truncated frame record".into()),
        _ => e.into(),
    })?;
    Ok(Some(
        buf.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect(),
    ))
}

/// One output line of the stream protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub t: usize,
    pub phase: usize,
    pub probs: Vec<f64>,
    pub latency_us: f64,
}

/// Runs the stream protocol: frame records in, one JSON line per frame out.
/// Returns the number of frames processed.
pub fn serve(model: &Model, input: &mut impl Read, output: &mut impl Write) -> Result<usize> {
    let mut session = Session::new(model);
    while let Some(frame) = read_frame_record(input)? {
        let out = session.step(&frame)?;
        let rec = PredictionRecord {
            t: out.t,
            phase: out.phase,
            probs: out.probs,
            latency_us: out.latency_us,
        };
        serde_json::to_writer(&mut *output, &rec)?;
        output.write_all(b"\n")?;
    }
    output.flush()?;
    Ok(session.time())
}

/// Parses the line-delimited output of [`serve`].
pub fn read_predictions(r: impl BufRead) -> Result<Vec<PredictionRecord>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
