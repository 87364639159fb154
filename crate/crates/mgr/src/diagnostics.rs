//! Depth-wise analysis instruments: angular-distance heatmaps, massive-
//! activation traces, per-block RMS profiles, gate statistics, pruning
//! sweeps, and the fused-kernel I/O estimator.
//!
//! Every instrument is read-only over the model parameters and
//! deterministic given the probe seed. Results serialize to CSV and JSON,
//! one file pair per metric, named `<checkpoint-id>.<metric>.csv/.json`.

use crate::data::{CorpusDataset, Split};
use crate::error::{MgrError, Result};
use crate::model::{
    forward_on_tape, Binder, ForwardOpts, ModelConfig, ModelParams,
};
use crate::rng::Rng;
use crate::tape::GradTape;
use crate::tensor::Real;
use std::io::Write as _;
use std::path::{Path, PathBuf};

// ── Report plumbing ──────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct ReportRow {
    pub metric: String,
    /// Block or sublayer index; -1 when not applicable.
    pub layer: i64,
    /// Stream index; -1 when not applicable.
    pub stream: i64,
    /// Metric-specific key (pair offset, histogram bin, top-k rank).
    pub key: i64,
    pub value: f64,
}

/// One metric's table plus the identifiers every row carries.
#[derive(Clone, Debug)]
pub struct DiagnosticsReport {
    pub config_hash: String,
    pub checkpoint_id: String,
    pub metric: String,
    pub rows: Vec<ReportRow>,
}

impl DiagnosticsReport {
    pub fn new(
        config_hash: &str,
        checkpoint_id: &str,
        metric: &str,
        rows: Vec<ReportRow>,
    ) -> Result<Self> {
        if let Some(bad) = rows.iter().find(|r| !r.value.is_finite()) {
            return Err(MgrError::Numeric(format!(
                "non-finite value in report {metric}: {bad:?}"
            )));
        }
        Ok(DiagnosticsReport {
            config_hash: config_hash.to_string(),
            checkpoint_id: checkpoint_id.to_string(),
            metric: metric.to_string(),
            rows,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("config_hash,checkpoint_id,metric,layer,stream,key,value\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                self.config_hash, self.checkpoint_id, r.metric, r.layer, r.stream, r.key, r.value
            ));
        }
        out
    }

    pub fn to_json(&self) -> String {
        let mut out = String::from("{");
        out.push_str(&format!(
            "\"config_hash\":\"{}\",\"checkpoint_id\":\"{}\",\"metric\":\"{}\",\"rows\":[",
            json_escape(&self.config_hash),
            json_escape(&self.checkpoint_id),
            json_escape(&self.metric)
        ));
        for (i, r) in self.rows.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            out.push_str(&format!(
                "{{\"metric\":\"{}\",\"layer\":{},\"stream\":{},\"key\":{},\"value\":{}}}",
                json_escape(&r.metric),
                r.layer,
                r.stream,
                r.key,
                r.value
            ));
        }
        out.push_str("]}");
        out
    }

    /// Write `<checkpoint-id>.<metric>.csv` and `.json` under `dir`.
    pub fn write_files(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        std::fs::create_dir_all(dir)?;
        let stem = format!("{}.{}", self.checkpoint_id, self.metric);
        let csv_path = dir.join(format!("{stem}.csv"));
        let json_path = dir.join(format!("{stem}.json"));
        let mut f = std::fs::File::create(&csv_path)?;
        f.write_all(self.to_csv().as_bytes())?;
        let mut f = std::fs::File::create(&json_path)?;
        f.write_all(self.to_json().as_bytes())?;
        Ok((csv_path, json_path))
    }
}

fn json_escape(s: &str) -> String {
    s.chars()
        .flat_map(|c| match c {
            '"' => "\\\"".chars().collect::<Vec<_>>(),
            '\\' => "\\\\".chars().collect(),
            '\n' => "\\n".chars().collect(),
            c if (c as u32) < 0x20 => format!("\\u{:04x}", c as u32).chars().collect(),
            c => vec![c],
        })
        .collect()
}

// ── Probe data ───────────────────────────────────────────────────────

/// Fixed evaluation batches the instruments run over.
pub struct ProbeSet {
    pub tokens: Vec<Vec<u32>>,
    pub targets: Vec<Vec<u32>>,
    pub batch: usize,
    pub seq: usize,
}

impl ProbeSet {
    /// Draw about `n_samples` sequences from the validation region,
    /// deterministically in the seed.
    pub fn from_dataset(
        ds: &CorpusDataset,
        n_samples: usize,
        batch: usize,
        seq: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = Rng::new(seed).derive("probe");
        let n_batches = n_samples.div_ceil(batch).max(1);
        let mut tokens = Vec::with_capacity(n_batches);
        let mut targets = Vec::with_capacity(n_batches);
        for _ in 0..n_batches {
            let (t, g) = ds.sample_batch(Split::Val, batch, seq, &mut rng)?;
            tokens.push(t);
            targets.push(g);
        }
        Ok(ProbeSet { tokens, targets, batch, seq })
    }

    pub fn n_batches(&self) -> usize {
        self.tokens.len()
    }
}

// ── Angular distance ─────────────────────────────────────────────────

/// (1/pi) * arccos of the cosine similarity, clamped into [-1, 1] before
/// the arccos. 0 = parallel, 0.5 = orthogonal, 1 = opposite.
pub fn angular_distance<F: Real>(x: &[F], y: &[F]) -> Result<f64> {
    let (mut dot, mut nx, mut ny) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in x.iter().zip(y) {
        let (a, b) = (a.to_f64(), b.to_f64());
        dot += a * b;
        nx += a * a;
        ny += b * b;
    }
    if nx == 0.0 || ny == 0.0 {
        return Err(MgrError::Numeric(
            "angular distance undefined for a zero vector".into(),
        ));
    }
    let cos = (dot / (nx.sqrt() * ny.sqrt())).clamp(-1.0, 1.0);
    Ok(cos.acos() / std::f64::consts::PI)
}

/// Which representation the heatmap follows through depth.
#[derive(Clone, Copy, Debug)]
pub enum AngularSite {
    /// The working hidden state entering each block.
    PooledH,
    /// One residual stream (MGR only).
    Stream(usize),
}

/// Pairwise angular distances d(x^l, x^{l+n}) between block-boundary
/// representations at the final token position, averaged over probe
/// sequences. Rows: layer = l, key = n.
pub fn angular_heatmap<F: Real>(
    cfg: &ModelConfig,
    params: &ModelParams<F>,
    probe: &ProbeSet,
    site: AngularSite,
) -> Result<Vec<ReportRow>> {
    if let AngularSite::Stream(i) = site {
        if !cfg.wiring.is_mgr() {
            return Err(MgrError::Wiring(
                "stream-indexed angular distance requires an MGR wiring".into(),
            ));
        }
        if i >= cfg.n_stream {
            return Err(MgrError::Config(format!(
                "stream index {i} out of range for {} streams",
                cfg.n_stream
            )));
        }
    }
    let boundaries = cfg.n_layers + 1;
    let mut sums = vec![0.0f64; boundaries * boundaries];
    let mut counts = vec![0u64; boundaries * boundaries];
    let stream_idx = match site {
        AngularSite::Stream(i) => Some(i),
        AngularSite::PooledH => None,
    };

    for toks in &probe.tokens {
        let mut tape = GradTape::new();
        let mut binder = Binder::new(params, false);
        let out = forward_on_tape(
            &mut tape,
            &mut binder,
            cfg,
            toks,
            probe.batch,
            probe.seq,
            ForwardOpts { trace: true, ..Default::default() },
        )?;
        // representation of each boundary at the final token, per sequence
        let mut reps: Vec<Vec<Vec<f64>>> = Vec::with_capacity(boundaries); // [boundary][seq][d]
        for l in 0..boundaries {
            let mut per_seq = Vec::with_capacity(probe.batch);
            match stream_idx {
                None => {
                    let t = tape.value(out.trace.boundary_h[l]);
                    let d = t.last_dim();
                    for b in 0..probe.batch {
                        let o = (b * probe.seq + probe.seq - 1) * d;
                        per_seq.push(t.data()[o..o + d].iter().map(|v| v.to_f64()).collect());
                    }
                }
                Some(i) => {
                    let t = tape.value(out.trace.boundary_streams[l]);
                    let n = t.shape()[2];
                    if i >= n {
                        // this stream has not grown in yet at this boundary
                        reps.push(Vec::new());
                        continue;
                    }
                    let d = t.shape()[3];
                    for b in 0..probe.batch {
                        let o = ((b * probe.seq + probe.seq - 1) * n + i) * d;
                        per_seq.push(t.data()[o..o + d].iter().map(|v| v.to_f64()).collect());
                    }
                }
            }
            reps.push(per_seq);
        }
        for l in 0..boundaries {
            for m in l..boundaries {
                if reps[l].is_empty() || reps[m].is_empty() {
                    continue;
                }
                for b in 0..probe.batch {
                    let xl: Vec<f64> = reps[l][b].clone();
                    let xm: Vec<f64> = reps[m][b].clone();
                    let d = angular_distance(&xl, &xm)?;
                    sums[l * boundaries + m] += d;
                    counts[l * boundaries + m] += 1;
                }
            }
        }
    }

    let mut rows = Vec::new();
    for l in 0..boundaries {
        for m in l..boundaries {
            let c = counts[l * boundaries + m];
            if c == 0 {
                continue;
            }
            rows.push(ReportRow {
                metric: "angular".into(),
                layer: l as i64,
                stream: stream_idx.map_or(-1, |i| i as i64),
                key: (m - l) as i64,
                value: sums[l * boundaries + m] / c as f64,
            });
        }
    }
    Ok(rows)
}

// ── Massive activations ──────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaSite {
    FfnOut,
    AttnOut,
    Stream,
}

impl MaSite {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ffn_out" => Ok(MaSite::FfnOut),
            "attn_out" => Ok(MaSite::AttnOut),
            "stream" => Ok(MaSite::Stream),
            other => Err(MgrError::Config(format!(
                "unknown site '{other}' (expected ffn_out, attn_out or stream)"
            ))),
        }
    }
}

fn push_top3(top: &mut [f64; 3], v: f64) {
    if v > top[0] {
        *top = [v, top[0], top[1]];
    } else if v > top[1] {
        *top = [top[0], v, top[1]];
    } else if v > top[2] {
        top[2] = v;
    }
}

/// The three largest absolute activation values per layer, pooled over all
/// probe samples before ranking. For `Stream` the per-(sublayer, stream)
/// maximum is reported instead.
pub fn massive_activation_trace<F: Real>(
    cfg: &ModelConfig,
    params: &ModelParams<F>,
    probe: &ProbeSet,
    site: MaSite,
) -> Result<Vec<ReportRow>> {
    if site == MaSite::Stream && !cfg.wiring.is_mgr() {
        return Err(MgrError::Wiring(
            "the stream site requires an MGR wiring".into(),
        ));
    }
    let mut top: Vec<[f64; 3]> = vec![[0.0; 3]; cfg.n_layers];
    let mut stream_max: Vec<Vec<f64>> =
        vec![vec![0.0; cfg.n_stream]; cfg.n_sublayers()];

    for toks in &probe.tokens {
        let mut tape = GradTape::new();
        let mut binder = Binder::new(params, false);
        let out = forward_on_tape(
            &mut tape,
            &mut binder,
            cfg,
            toks,
            probe.batch,
            probe.seq,
            ForwardOpts { trace: true, ..Default::default() },
        )?;
        match site {
            MaSite::FfnOut | MaSite::AttnOut => {
                let want = if site == MaSite::FfnOut { 1 } else { 0 };
                for (sub, id) in &out.trace.sublayer_outputs {
                    if sub % 2 != want {
                        continue;
                    }
                    let block = sub / 2;
                    for &v in tape.value(*id).data() {
                        push_top3(&mut top[block], v.abs().to_f64());
                    }
                }
            }
            MaSite::Stream => {
                for (sub, id) in &out.trace.streams_after {
                    let t = tape.value(*id);
                    let (n, d) = (t.shape()[2], t.shape()[3]);
                    for bt in 0..t.numel() / (n * d) {
                        for i in 0..n {
                            let o = (bt * n + i) * d;
                            for &v in &t.data()[o..o + d] {
                                let a = v.abs().to_f64();
                                if a > stream_max[*sub][i] {
                                    stream_max[*sub][i] = a;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    let mut rows = Vec::new();
    match site {
        MaSite::FfnOut | MaSite::AttnOut => {
            let name = if site == MaSite::FfnOut { "massive_ffn" } else { "massive_attn" };
            for (block, t3) in top.iter().enumerate() {
                for (rank, v) in t3.iter().enumerate() {
                    rows.push(ReportRow {
                        metric: name.into(),
                        layer: block as i64,
                        stream: -1,
                        key: rank as i64 + 1,
                        value: *v,
                    });
                }
            }
        }
        MaSite::Stream => {
            for (sub, per_stream) in stream_max.iter().enumerate() {
                let n_now = per_stream.iter().filter(|v| **v > 0.0).count().max(1);
                for (i, v) in per_stream.iter().enumerate().take(cfg.n_stream) {
                    if i >= n_now && *v == 0.0 && sub < cfg.growth_steps() {
                        continue; // stream not born yet at this sublayer
                    }
                    rows.push(ReportRow {
                        metric: "massive_stream".into(),
                        layer: sub as i64,
                        stream: i as i64,
                        key: 0,
                        value: *v,
                    });
                }
            }
        }
    }
    Ok(rows)
}

// ── RMS profiles ─────────────────────────────────────────────────────

/// RMS of the representation each block emits, pooled over probe tokens.
pub fn layer_rms_profile<F: Real>(
    cfg: &ModelConfig,
    params: &ModelParams<F>,
    probe: &ProbeSet,
) -> Result<Vec<ReportRow>> {
    let mut sums = vec![0.0f64; cfg.n_layers];
    let mut counts = vec![0u64; cfg.n_layers];
    for toks in &probe.tokens {
        let mut tape = GradTape::new();
        let mut binder = Binder::new(params, false);
        let out = forward_on_tape(
            &mut tape,
            &mut binder,
            cfg,
            toks,
            probe.batch,
            probe.seq,
            ForwardOpts { trace: true, ..Default::default() },
        )?;
        for b in 0..cfg.n_layers {
            let t = tape.value(out.trace.boundary_h[b + 1]);
            sums[b] += t.data().iter().map(|v| v.to_f64() * v.to_f64()).sum::<f64>();
            counts[b] += t.numel() as u64;
        }
    }
    Ok((0..cfg.n_layers)
        .map(|b| ReportRow {
            metric: "rms".into(),
            layer: b as i64,
            stream: -1,
            key: -1,
            value: (sums[b] / counts[b] as f64).sqrt(),
        })
        .collect())
}

/// Per-block RMS gradient: one backward per probe batch, gradients averaged
/// over batches, then the RMS over every parameter element in the block.
pub fn grad_rms_profile<F: Real>(
    cfg: &ModelConfig,
    params: &ModelParams<F>,
    probe: &ProbeSet,
) -> Result<Vec<ReportRow>> {
    let mut acc: Vec<Vec<f64>> =
        params.entries().iter().map(|e| vec![0.0; e.tensor.numel()]).collect();
    for (toks, tgts) in probe.tokens.iter().zip(&probe.targets) {
        let mut tape = GradTape::new();
        let mut binder = Binder::new(params, true);
        let out = forward_on_tape(
            &mut tape,
            &mut binder,
            cfg,
            toks,
            probe.batch,
            probe.seq,
            ForwardOpts::default(),
        )?;
        let loss = tape.cross_entropy(out.logits, tgts);
        tape.backward(loss)?;
        for (pi, id) in binder.bound() {
            if let Some(g) = tape.grad_slice(id) {
                for (a, v) in acc[pi].iter_mut().zip(g) {
                    *a += v.to_f64();
                }
            }
        }
    }
    let nb = probe.n_batches() as f64;
    let mut rows = Vec::new();
    for b in 0..cfg.n_layers {
        let prefix = format!("block{b}.");
        let (mut ss, mut n) = (0.0f64, 0u64);
        for (pi, e) in params.entries().iter().enumerate() {
            if e.name.starts_with(&prefix) {
                for v in &acc[pi] {
                    let m = v / nb;
                    ss += m * m;
                }
                n += e.tensor.numel() as u64;
            }
        }
        rows.push(ReportRow {
            metric: "grad_rms".into(),
            layer: b as i64,
            stream: -1,
            key: -1,
            value: (ss / n as f64).sqrt(),
        });
    }
    Ok(rows)
}

// ── Gate statistics ──────────────────────────────────────────────────

/// Histogram width over [0, 1] for the gate distribution.
pub const GATE_HIST_BINS: usize = 100;

/// Distribution summaries of the gate values per lerping sublayer:
/// mean, quartiles, max, a 100-bin histogram, and the per-token maximum of
/// the gate sum (strictly below 1 for the competitive variant).
pub fn gate_statistics<F: Real>(
    cfg: &ModelConfig,
    params: &ModelParams<F>,
    probe: &ProbeSet,
) -> Result<Vec<ReportRow>> {
    if !cfg.wiring.is_mgr() {
        return Err(MgrError::Wiring(format!(
            "gate statistics require an MGR wiring, got {}",
            cfg.wiring.name()
        )));
    }
    let n_sub = cfg.n_sublayers();
    let mut values: Vec<Vec<f64>> = vec![Vec::new(); n_sub];
    let mut sum_max = vec![0.0f64; n_sub];
    for toks in &probe.tokens {
        let mut tape = GradTape::new();
        let mut binder = Binder::new(params, false);
        let out = forward_on_tape(
            &mut tape,
            &mut binder,
            cfg,
            toks,
            probe.batch,
            probe.seq,
            ForwardOpts { trace: true, ..Default::default() },
        )?;
        for (sub, id) in &out.trace.betas {
            let t = tape.value(*id);
            let n = t.last_dim();
            for row in t.data().chunks_exact(n) {
                let mut s = 0.0;
                for &v in row {
                    let v = v.to_f64();
                    values[*sub].push(v);
                    s += v;
                }
                if s > sum_max[*sub] {
                    sum_max[*sub] = s;
                }
            }
        }
    }

    let mut rows = Vec::new();
    for sub in 0..n_sub {
        if values[sub].is_empty() {
            continue;
        }
        let vals = &mut values[sub];
        vals.sort_unstable_by(f64::total_cmp);
        let n = vals.len();
        let q = |p: f64| vals[(p * (n - 1) as f64).round() as usize];
        let mean = vals.iter().sum::<f64>() / n as f64;
        let layer = sub as i64;
        for (name, v) in [
            ("gate_mean", mean),
            ("gate_q25", q(0.25)),
            ("gate_q50", q(0.50)),
            ("gate_q75", q(0.75)),
            ("gate_max", vals[n - 1]),
            ("gate_sum_max", sum_max[sub]),
        ] {
            rows.push(ReportRow { metric: name.into(), layer, stream: -1, key: -1, value: v });
        }
        let mut hist = vec![0u64; GATE_HIST_BINS];
        for &v in vals.iter() {
            let bin = ((v * GATE_HIST_BINS as f64) as usize).min(GATE_HIST_BINS - 1);
            hist[bin] += 1;
        }
        for (bin, count) in hist.iter().enumerate() {
            rows.push(ReportRow {
                metric: "gate_hist".into(),
                layer,
                stream: -1,
                key: bin as i64,
                value: *count as f64,
            });
        }
    }
    Ok(rows)
}

// ── Pruning sweep ────────────────────────────────────────────────────

/// Perplexity increase from removing one block, over the probe batches.
/// Emits the raw delta per block plus its log10 where the delta is
/// positive, and the unpruned baseline under `base_ppl`.
pub fn prune_sweep<F: Real>(
    cfg: &ModelConfig,
    params: &ModelParams<F>,
    probe: &ProbeSet,
) -> Result<Vec<ReportRow>> {
    let ppl_with = |skip: Option<usize>| -> Result<f64> {
        let mut total = 0.0;
        for (toks, tgts) in probe.tokens.iter().zip(&probe.targets) {
            let logits = crate::model::forward_logits(
                cfg,
                params,
                toks,
                probe.batch,
                probe.seq,
                ForwardOpts { skip_block: skip, ..Default::default() },
            )?;
            total += crate::model::cross_entropy_value(&logits, tgts);
        }
        Ok((total / probe.n_batches() as f64).exp())
    };

    let base = ppl_with(None)?;
    let mut rows = vec![ReportRow {
        metric: "base_ppl".into(),
        layer: -1,
        stream: -1,
        key: -1,
        value: base,
    }];
    for block in cfg.first_prunable_block()..cfg.n_layers {
        let delta = ppl_with(Some(block))? - base;
        rows.push(ReportRow {
            metric: "delta_ppl".into(),
            layer: block as i64,
            stream: -1,
            key: -1,
            value: delta,
        });
        if delta > 0.0 {
            rows.push(ReportRow {
                metric: "delta_ppl_log10".into(),
                layer: block as i64,
                stream: -1,
                key: -1,
                value: delta.log10(),
            });
        }
    }
    Ok(rows)
}

// ── Fused-kernel I/O estimate ────────────────────────────────────────

/// Memory traffic of a fully fused interpolation + pooling kernel over the
/// n-fold stream state of one token: three reads and one write of size n*C.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IoEstimate {
    pub read_elements: u64,
    pub write_elements: u64,
    pub read_bytes: u64,
    pub write_bytes: u64,
}

pub fn fused_io_estimate(n_stream: usize, d_model: usize, bytes_per_element: usize) -> IoEstimate {
    let nc = (n_stream * d_model) as u64;
    IoEstimate {
        read_elements: 3 * nc,
        write_elements: nc,
        read_bytes: 3 * nc * bytes_per_element as u64,
        write_bytes: nc * bytes_per_element as u64,
    }
}

pub fn io_estimate_rows(n_stream: usize, d_model: usize, bytes_per_element: usize) -> Vec<ReportRow> {
    let est = fused_io_estimate(n_stream, d_model, bytes_per_element);
    [
        ("io_read_elements", est.read_elements),
        ("io_write_elements", est.write_elements),
        ("io_read_bytes", est.read_bytes),
        ("io_write_bytes", est.write_bytes),
    ]
    .into_iter()
    .map(|(m, v)| ReportRow { metric: m.into(), layer: -1, stream: -1, key: -1, value: v as f64 })
    .collect()
}

/// Sanity helper for tests: a stable hash over parameter bytes, to prove
/// the instruments never mutate the model.
pub fn params_fingerprint<F: Real>(params: &ModelParams<F>) -> u64 {
    let mut bytes = Vec::new();
    for e in params.entries() {
        bytes.extend_from_slice(e.name.as_bytes());
        for v in e.tensor.data() {
            v.write_le(&mut bytes);
        }
    }
    crate::ckpt::fnv1a(&bytes)
}
