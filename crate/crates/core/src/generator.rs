//! Conditional topology generator.
//!
//! Two message-passing encoders (profile channel and condition channel) map
//! stacked agent embeddings to latent states over the symmetrized anchor
//! graph. A pairwise MLP decoder then scores every ordered agent pair from
//! both endpoints' latents plus the projected query.
//!
//! ```text
//! Â   = D⁻¹ (A_sym + I)
//! H   = relu(Â · relu(Â · X · W1) · W2)
//! h_q = relu(q · W_q)
//! S_ij = σ(w2 · relu(W1ᵀ [h_p,i ; h_c,i ; h_p,j ; h_c,j ; h_q] + b1) + b2),  S_ii = 0
//! ```

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::agent::{verbalize_condition, verbalize_profile, ConditionSet, Query, Roster};
use crate::embedding::{Embedder, EmbedderKind, EmbedderSpec};
use crate::error::{CardError, Result};
use crate::graph::{AnchorTopology, CommTopology, EdgeProbabilityMatrix};
use crate::linalg::{relu, sigmoid, vecmat, Mat};

/// Number of latent blocks concatenated into one decoder input.
const PAIR_BLOCKS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GeneratorDims {
    pub d_in: usize,
    pub d_hid: usize,
    pub d_lat: usize,
    pub d_dec: usize,
}

impl Default for GeneratorDims {
    fn default() -> Self {
        GeneratorDims { d_in: 64, d_hid: 32, d_lat: 16, d_dec: 32 }
    }
}

impl GeneratorDims {
    fn validate(&self) -> Result<()> {
        if [self.d_in, self.d_hid, self.d_lat, self.d_dec].contains(&0) {
            return Err(CardError::Invalid("generator dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// Weights of one encoder channel.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelWeights {
    pub w1: Mat,
    pub w2: Mat,
}

impl ChannelWeights {
    fn zeros(dims: &GeneratorDims) -> Self {
        ChannelWeights { w1: Mat::zeros(dims.d_in, dims.d_hid), w2: Mat::zeros(dims.d_hid, dims.d_lat) }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderWeights {
    /// `(5·d_lat) × d_dec`
    pub w1: Mat,
    /// `1 × d_dec`
    pub b1: Mat,
    /// `d_dec × 1`
    pub w2: Mat,
    /// `1 × 1`
    pub b2: Mat,
}

impl DecoderWeights {
    fn zeros(dims: &GeneratorDims) -> Self {
        DecoderWeights {
            w1: Mat::zeros(PAIR_BLOCKS * dims.d_lat, dims.d_dec),
            b1: Mat::zeros(1, dims.d_dec),
            w2: Mat::zeros(dims.d_dec, 1),
            b2: Mat::zeros(1, 1),
        }
    }
}

/// All trainable weights, plus the configuration needed to reproduce them.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorParams {
    pub dims: GeneratorDims,
    pub seed: u64,
    pub embedder: EmbedderSpec,
    pub enc_p: ChannelWeights,
    pub enc_c: ChannelWeights,
    pub dec: DecoderWeights,
    pub w_q: Mat,
}

pub const TENSOR_NAMES: [&str; 9] =
    ["enc_p.w1", "enc_p.w2", "enc_c.w1", "enc_c.w2", "dec.w1", "dec.b1", "dec.w2", "dec.b2", "w_q"];

impl GeneratorParams {
    pub fn zeros(dims: GeneratorDims, embedder: EmbedderSpec) -> Result<Self> {
        dims.validate()?;
        embedder.validate()?;
        if embedder.dimension != dims.d_in {
            return Err(CardError::ShapeMismatch(format!(
                "embedder dimension {} != d_in {}",
                embedder.dimension, dims.d_in
            )));
        }
        Ok(GeneratorParams {
            dims,
            seed: 0,
            embedder,
            enc_p: ChannelWeights::zeros(&dims),
            enc_c: ChannelWeights::zeros(&dims),
            dec: DecoderWeights::zeros(&dims),
            w_q: Mat::zeros(dims.d_in, dims.d_lat),
        })
    }

    /// Glorot-uniform weights from `seed`; biases start at zero.
    pub fn init(dims: GeneratorDims, embedder: EmbedderSpec, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(dims, embedder)?;
        p.seed = seed;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, m) in p.tensors_mut() {
            if name.contains(".b") {
                continue;
            }
            let r = (6.0 / (m.rows() + m.cols()) as f64).sqrt();
            m.as_mut_slice().iter_mut().for_each(|v| *v = rng.gen_range(-r..=r));
        }
        Ok(p)
    }

    pub fn with_default_dims(seed: u64) -> Self {
        Self::init(GeneratorDims::default(), EmbedderSpec::default(), seed).expect("default dimensions are consistent")
    }

    /// Same shapes, all zero. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.tensors_mut().into_iter().for_each(|(_, m)| m.fill(0.0));
        z
    }

    pub fn tensors(&self) -> [(&'static str, &Mat); 9] {
        [
            (TENSOR_NAMES[0], &self.enc_p.w1),
            (TENSOR_NAMES[1], &self.enc_p.w2),
            (TENSOR_NAMES[2], &self.enc_c.w1),
            (TENSOR_NAMES[3], &self.enc_c.w2),
            (TENSOR_NAMES[4], &self.dec.w1),
            (TENSOR_NAMES[5], &self.dec.b1),
            (TENSOR_NAMES[6], &self.dec.w2),
            (TENSOR_NAMES[7], &self.dec.b2),
            (TENSOR_NAMES[8], &self.w_q),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Mat); 9] {
        [
            (TENSOR_NAMES[0], &mut self.enc_p.w1),
            (TENSOR_NAMES[1], &mut self.enc_p.w2),
            (TENSOR_NAMES[2], &mut self.enc_c.w1),
            (TENSOR_NAMES[3], &mut self.enc_c.w2),
            (TENSOR_NAMES[4], &mut self.dec.w1),
            (TENSOR_NAMES[5], &mut self.dec.b1),
            (TENSOR_NAMES[6], &mut self.dec.w2),
            (TENSOR_NAMES[7], &mut self.dec.b2),
            (TENSOR_NAMES[8], &mut self.w_q),
        ]
    }

    /// `self += scale · other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &GeneratorParams, scale: f64) {
        let theirs = other.tensors();
        for ((_, mine), (_, t)) in self.tensors_mut().into_iter().zip(theirs) {
            mine.add_scaled(t, scale);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, m)| m.is_finite())
    }

    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.tensors().iter().find(|(_, m)| !m.is_finite()).map(|(n, _)| *n)
    }

    pub fn l2_norm(&self) -> f64 {
        self.tensors().iter().flat_map(|(_, m)| m.as_slice().iter()).map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn embedder(&self) -> Result<Embedder> {
        Embedder::new(self.embedder)
    }

    pub fn to_checkpoint(&self) -> String {
        let d = &self.dims;
        let mut out = String::new();
        writeln!(out, "card-checkpoint 1").unwrap();
        writeln!(out, "dims {} {} {} {}", d.d_in, d.d_hid, d.d_lat, d.d_dec).unwrap();
        writeln!(out, "seed {}", self.seed).unwrap();
        let kind = match self.embedder.kind {
            EmbedderKind::FeatureHash => "feature-hash",
            EmbedderKind::External => "external",
        };
        writeln!(out, "embedder {kind} {} {}", self.embedder.dimension, self.embedder.seed).unwrap();
        for (name, m) in self.tensors() {
            writeln!(out, "tensor {name} {} {}", m.rows(), m.cols()).unwrap();
            for i in 0..m.rows() {
                let row: Vec<String> = m.row(i).iter().map(|v| v.to_string()).collect();
                writeln!(out, "{}", row.join(" ")).unwrap();
            }
        }
        out
    }

    pub fn from_checkpoint(text: &str, origin: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let mut next = |what: &str| {
            lines
                .next()
                .ok_or_else(|| CardError::parse(origin, 0, 1, format!("unexpected end of file, expected {what}")))
        };
        let header = |origin: &str, (no, line): (usize, &str), key: &str, n: usize| -> Result<Vec<String>> {
            let mut parts = line.split_whitespace();
            if parts.next() != Some(key) {
                return Err(CardError::parse(origin, no, 1, format!("expected `{key}`")));
            }
            let rest: Vec<String> = parts.map(str::to_string).collect();
            if rest.len() != n {
                return Err(CardError::parse(origin, no, 1, format!("`{key}` takes {n} fields")));
            }
            Ok(rest)
        };
        let num = |origin: &str, no: usize, s: &str| -> Result<u64> {
            s.parse().map_err(|_| CardError::parse(origin, no, 1, format!("`{s}` is not an integer")))
        };

        let first = next("header")?;
        if first.1.trim() != "card-checkpoint 1" {
            return Err(CardError::parse(origin, first.0, 1, "not a version-1 checkpoint"));
        }
        let l = next("dims")?;
        let f = header(origin, l, "dims", 4)?;
        let dims = GeneratorDims {
            d_in: num(origin, l.0, &f[0])? as usize,
            d_hid: num(origin, l.0, &f[1])? as usize,
            d_lat: num(origin, l.0, &f[2])? as usize,
            d_dec: num(origin, l.0, &f[3])? as usize,
        };
        let l = next("seed")?;
        let seed = num(origin, l.0, &header(origin, l, "seed", 1)?[0])?;
        let l = next("embedder")?;
        let f = header(origin, l, "embedder", 3)?;
        let kind = match f[0].as_str() {
            "feature-hash" => EmbedderKind::FeatureHash,
            "external" => EmbedderKind::External,
            other => return Err(CardError::parse(origin, l.0, 1, format!("unknown embedder `{other}`"))),
        };
        let embedder =
            EmbedderSpec { kind, dimension: num(origin, l.0, &f[1])? as usize, seed: num(origin, l.0, &f[2])? };
        let mut params = GeneratorParams::zeros(dims, embedder)?;
        params.seed = seed;
        for (name, m) in params.tensors_mut() {
            let l = next(name)?;
            let f = header(origin, l, "tensor", 3)?;
            let (rows, cols) = (num(origin, l.0, &f[1])? as usize, num(origin, l.0, &f[2])? as usize);
            if f[0] != name || (rows, cols) != m.shape() {
                return Err(CardError::parse(
                    origin,
                    l.0,
                    1,
                    format!("expected tensor {name} {}x{}", m.rows(), m.cols()),
                ));
            }
            for i in 0..rows {
                let (no, line) = next(name)?;
                let row = m.row_mut(i);
                let mut count = 0;
                for (j, tok) in line.split_whitespace().enumerate() {
                    if j >= cols {
                        return Err(CardError::parse(origin, no, 1, "too many values"));
                    }
                    row[j] =
                        tok.parse().map_err(|_| CardError::parse(origin, no, 1, format!("`{tok}` is not a number")))?;
                    count += 1;
                }
                if count != cols {
                    return Err(CardError::parse(origin, no, 1, format!("expected {cols} values")));
                }
            }
        }
        if !params.is_finite() {
            return Err(CardError::Invalid(format!("{origin}: checkpoint has non-finite weights")));
        }
        Ok(params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(&path, self.to_checkpoint()).map_err(|e| CardError::io(&path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(&path).map_err(|e| CardError::io(&path, e))?;
        Self::from_checkpoint(&text, &path.as_ref().display().to_string())
    }

    /// Hex SHA-256 of the checkpoint serialization.
    pub fn digest(&self) -> String {
        hex_digest(self.to_checkpoint().as_bytes())
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Per-agent latent states of both channels plus the projected query.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentStates {
    pub h_p: Mat,
    pub h_c: Mat,
    pub h_q: Vec<f64>,
}

/// `D⁻¹ (A_sym + I)` for the anchor.
pub fn normalized_anchor(anchor: &AnchorTopology) -> Mat {
    let n = anchor.n;
    let mut a = Mat::identity(n);
    for i in 0..n {
        for j in 0..n {
            if anchor.has_edge(i, j) || anchor.has_edge(j, i) {
                a[(i, j)] = 1.0;
            }
        }
    }
    for i in 0..n {
        let deg: f64 = a.row(i).iter().sum();
        a.row_mut(i).iter_mut().for_each(|v| *v /= deg);
    }
    a
}

struct ChannelTrace {
    ax: Mat,
    p1: Mat,
    ah1: Mat,
    p2: Mat,
    h: Mat,
}

fn channel_forward(a_hat: &Mat, x: &Mat, w: &ChannelWeights) -> Result<ChannelTrace> {
    if x.rows() != a_hat.rows() {
        return Err(CardError::ShapeMismatch(format!(
            "{} embedding rows for an anchor over {} agents",
            x.rows(),
            a_hat.rows()
        )));
    }
    let ax = a_hat.matmul(x)?;
    let p1 = ax.matmul(&w.w1)?;
    let h1 = p1.map(relu);
    let ah1 = a_hat.matmul(&h1)?;
    let p2 = ah1.matmul(&w.w2)?;
    let h = p2.map(relu);
    Ok(ChannelTrace { ax, p1, ah1, p2, h })
}

fn relu_mask(grad: &Mat, pre: &Mat) -> Mat {
    let mut out = grad.clone();
    for (g, &p) in out.as_mut_slice().iter_mut().zip(pre.as_slice()) {
        if p <= 0.0 {
            *g = 0.0;
        }
    }
    out
}

fn channel_backward(
    a_hat: &Mat,
    trace: &ChannelTrace,
    w: &ChannelWeights,
    dh: &Mat,
    grad: &mut ChannelWeights,
) -> Result<()> {
    let dp2 = relu_mask(dh, &trace.p2);
    grad.w2.add_scaled(&trace.ah1.t_matmul(&dp2)?, 1.0);
    let d_ah1 = dp2.matmul_t(&w.w2)?;
    let dh1 = a_hat.t_matmul(&d_ah1)?;
    let dp1 = relu_mask(&dh1, &trace.p1);
    grad.w1.add_scaled(&trace.ax.t_matmul(&dp1)?, 1.0);
    Ok(())
}

/// One encoder channel: `relu(Â · relu(Â · X · W1) · W2)`.
pub fn encode(x: &Mat, anchor: &AnchorTopology, weights: &ChannelWeights) -> Result<Mat> {
    if x.rows() != anchor.n {
        return Err(CardError::ShapeMismatch(format!(
            "{} embedding rows for an anchor over {} agents",
            x.rows(),
            anchor.n
        )));
    }
    Ok(channel_forward(&normalized_anchor(anchor), x, weights)?.h)
}

pub fn project_query(q: &[f64], params: &GeneratorParams) -> Result<Vec<f64>> {
    Ok(vecmat(q, &params.w_q)?.into_iter().map(relu).collect())
}

fn pair_input(lat: &LatentStates, i: usize, j: usize) -> Vec<f64> {
    let mut z = Vec::with_capacity(PAIR_BLOCKS * lat.h_q.len());
    z.extend_from_slice(lat.h_p.row(i));
    z.extend_from_slice(lat.h_c.row(i));
    z.extend_from_slice(lat.h_p.row(j));
    z.extend_from_slice(lat.h_c.row(j));
    z.extend_from_slice(&lat.h_q);
    z
}

struct PairTrace {
    z: Vec<f64>,
    pre: Vec<f64>,
    hidden: Vec<f64>,
}

fn score_pair(z: Vec<f64>, dec: &DecoderWeights) -> Result<(PairTrace, f64)> {
    let mut pre = vecmat(&z, &dec.w1)?;
    for (p, b) in pre.iter_mut().zip(dec.b1.as_slice()) {
        *p += b;
    }
    let hidden: Vec<f64> = pre.iter().copied().map(relu).collect();
    let logit = crate::linalg::dot(&hidden, dec.w2.as_slice()) + dec.b2[(0, 0)];
    Ok((PairTrace { z, pre, hidden }, sigmoid(logit)))
}

fn check_latents(lat: &LatentStates, dims: &GeneratorDims) -> Result<()> {
    let n = lat.h_p.rows();
    if lat.h_c.rows() != n
        || lat.h_p.cols() != dims.d_lat
        || lat.h_c.cols() != dims.d_lat
        || lat.h_q.len() != dims.d_lat
    {
        return Err(CardError::ShapeMismatch("latent states do not match decoder width".into()));
    }
    Ok(())
}

/// Pairwise decoder. Diagonal is forced to zero.
pub fn decode_edges(lat: &LatentStates, params: &GeneratorParams) -> Result<EdgeProbabilityMatrix> {
    check_latents(lat, &params.dims)?;
    let n = lat.h_p.rows();
    let mut s = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s[i * n + j] = score_pair(pair_input(lat, i, j), &params.dec)?.1;
            }
        }
    }
    EdgeProbabilityMatrix::from_values(n, s)
}

/// Embedded generator inputs for one (roster, conditions, query) triple.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorInputs {
    pub x_p: Mat,
    pub x_c: Mat,
    pub q: Vec<f64>,
}

impl GeneratorInputs {
    pub fn build(embedder: &Embedder, roster: &Roster, conditions: &ConditionSet, query: &Query) -> Result<Self> {
        Ok(GeneratorInputs {
            x_p: Self::profile_matrix(embedder, roster)?,
            x_c: Self::condition_matrix(embedder, roster, conditions)?,
            q: embedder.embed(&query.text)?.into_vec(),
        })
    }

    pub fn profile_matrix(embedder: &Embedder, roster: &Roster) -> Result<Mat> {
        if roster.is_empty() {
            return Err(CardError::Invalid("roster is empty".into()));
        }
        let texts: Vec<String> = roster.iter().map(verbalize_profile).collect();
        embedder.batch_embed(&texts)
    }

    pub fn condition_matrix(embedder: &Embedder, roster: &Roster, conditions: &ConditionSet) -> Result<Mat> {
        if roster.is_empty() {
            return Err(CardError::Invalid("roster is empty".into()));
        }
        conditions.validate(roster)?;
        let texts = roster.iter().map(|a| verbalize_condition(&a.id, conditions)).collect::<Result<Vec<_>>>()?;
        embedder.batch_embed(&texts)
    }

    pub fn n(&self) -> usize {
        self.x_p.rows()
    }
}

/// Everything computed on the way to `S`, kept for the backward pass.
pub struct ForwardPass {
    a_hat: Mat,
    profile: ChannelTrace,
    condition: ChannelTrace,
    q: Vec<f64>,
    q_pre: Vec<f64>,
    pairs: Vec<Option<PairTrace>>,
    s: EdgeProbabilityMatrix,
}

impl ForwardPass {
    pub fn matrix(&self) -> &EdgeProbabilityMatrix {
        &self.s
    }

    pub fn latents(&self) -> LatentStates {
        LatentStates {
            h_p: self.profile.h.clone(),
            h_c: self.condition.h.clone(),
            h_q: self.q_pre.iter().copied().map(relu).collect(),
        }
    }
}

pub fn forward(params: &GeneratorParams, inputs: &GeneratorInputs, anchor: &AnchorTopology) -> Result<ForwardPass> {
    let n = inputs.n();
    if anchor.n != n || inputs.x_c.rows() != n {
        return Err(CardError::ShapeMismatch(format!(
            "anchor over {} agents, inputs for {n}/{}",
            anchor.n,
            inputs.x_c.rows()
        )));
    }
    if inputs.x_p.cols() != params.dims.d_in || inputs.x_c.cols() != params.dims.d_in {
        return Err(CardError::ShapeMismatch(format!(
            "embedding width {} != d_in {}",
            inputs.x_p.cols(),
            params.dims.d_in
        )));
    }
    let a_hat = normalized_anchor(anchor);
    let profile = channel_forward(&a_hat, &inputs.x_p, &params.enc_p)?;
    let condition = channel_forward(&a_hat, &inputs.x_c, &params.enc_c)?;
    let q_pre = vecmat(&inputs.q, &params.w_q)?;
    let lat = LatentStates {
        h_p: profile.h.clone(),
        h_c: condition.h.clone(),
        h_q: q_pre.iter().copied().map(relu).collect(),
    };
    let mut pairs = Vec::with_capacity(n * n);
    let mut s = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                pairs.push(None);
                continue;
            }
            let (trace, p) = score_pair(pair_input(&lat, i, j), &params.dec)?;
            s[i * n + j] = p;
            pairs.push(Some(trace));
        }
    }
    Ok(ForwardPass {
        a_hat,
        profile,
        condition,
        q: inputs.q.clone(),
        q_pre,
        pairs,
        s: EdgeProbabilityMatrix::from_values(n, s)?,
    })
}

/// Gradient of a loss with respect to every parameter, given `∂L/∂S`
/// (`n × n`, diagonal ignored).
pub fn backward(params: &GeneratorParams, fwd: &ForwardPass, d_s: &Mat) -> Result<GeneratorParams> {
    let n = fwd.s.n();
    if d_s.shape() != (n, n) {
        return Err(CardError::ShapeMismatch(format!("∂L/∂S is {:?}, expected {n}x{n}", d_s.shape())));
    }
    let dims = params.dims;
    let lat = dims.d_lat;
    let mut grad = params.zeros_like();
    let mut dh_p = Mat::zeros(n, lat);
    let mut dh_c = Mat::zeros(n, lat);
    let mut dh_q = vec![0.0; lat];
    let w2 = params.dec.w2.as_slice();
    for i in 0..n {
        for j in 0..n {
            let Some(trace) = &fwd.pairs[i * n + j] else { continue };
            let s = fwd.s.get(i, j);
            let d_logit = d_s[(i, j)] * s * (1.0 - s);
            if d_logit == 0.0 {
                continue;
            }
            grad.dec.b2[(0, 0)] += d_logit;
            let mut d_pre = vec![0.0; dims.d_dec];
            for k in 0..dims.d_dec {
                grad.dec.w2[(k, 0)] += d_logit * trace.hidden[k];
                if trace.pre[k] > 0.0 {
                    d_pre[k] = d_logit * w2[k];
                }
            }
            for (g, d) in grad.dec.b1.as_mut_slice().iter_mut().zip(&d_pre) {
                *g += d;
            }
            for (r, &zr) in trace.z.iter().enumerate() {
                if zr != 0.0 {
                    for (g, d) in grad.dec.w1.row_mut(r).iter_mut().zip(&d_pre) {
                        *g += zr * d;
                    }
                }
            }
            // ∂z = W1 · ∂pre, scattered back to the five latent blocks.
            for r in 0..PAIR_BLOCKS * lat {
                let dz = crate::linalg::dot(params.dec.w1.row(r), &d_pre);
                let (block, k) = (r / lat, r % lat);
                match block {
                    0 => dh_p[(i, k)] += dz,
                    1 => dh_c[(i, k)] += dz,
                    2 => dh_p[(j, k)] += dz,
                    3 => dh_c[(j, k)] += dz,
                    _ => dh_q[k] += dz,
                }
            }
        }
    }
    channel_backward(&fwd.a_hat, &fwd.profile, &params.enc_p, &dh_p, &mut grad.enc_p)?;
    channel_backward(&fwd.a_hat, &fwd.condition, &params.enc_c, &dh_c, &mut grad.enc_c)?;
    for (k, &pre) in fwd.q_pre.iter().enumerate() {
        if pre > 0.0 && dh_q[k] != 0.0 {
            for (r, &qr) in fwd.q.iter().enumerate() {
                grad.w_q[(r, k)] += qr * dh_q[k];
            }
        }
    }
    Ok(grad)
}

/// Full pipeline with an explicit embedder.
pub fn generate_with(
    embedder: &Embedder,
    roster: &Roster,
    conditions: &ConditionSet,
    query: &Query,
    anchor: &AnchorTopology,
    params: &GeneratorParams,
    tau: f64,
) -> Result<(EdgeProbabilityMatrix, CommTopology)> {
    let inputs = GeneratorInputs::build(embedder, roster, conditions, query)?;
    let s = forward(params, &inputs, anchor)?.s;
    let topology = CommTopology::from_matrix(&s, tau)?;
    Ok((s, topology))
}

/// verbalize → embed → encode → project query → decode → threshold →
/// repair → schedule, using the embedder recorded in `params`.
pub fn generate(
    roster: &Roster,
    conditions: &ConditionSet,
    query: &Query,
    anchor: &AnchorTopology,
    params: &GeneratorParams,
    tau: f64,
) -> Result<(EdgeProbabilityMatrix, CommTopology)> {
    generate_with(&params.embedder()?, roster, conditions, query, anchor, params, tau)
}
