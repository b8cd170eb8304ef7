//! Toy pre-norm Transformer blocks, their width-reduced wrapping with
//! projection pairs, projection merging, and distillation losses.
//!
//! Row-vector convention throughout: a layer maps `L × D` to `L × D` and
//! weights multiply from the right.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::binio::{put_f32s, put_u32, Cursor};
use crate::dumps::F32Matrix;
use crate::error::{domain, Error, Result};
use crate::initlab::ChannelSelection;
use crate::linalg::{gaussian_matrix, log_sum_exp, row_vec, softmax};
use crate::spectral::rmsnorm_rows;

pub const WEIGHTS_MAGIC: &[u8; 4] = b"EDAW";
pub const WEIGHTS_VERSION: u32 = 1;

fn silu(z: f64) -> f64 {
    z / (1.0 + (-z).exp())
}

/// Frozen block: `H = X + Attn(Norm_a(X))`, `Y = H + FFN(Norm_f(H))`.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherLayer {
    pub w_q: DMatrix<f64>,
    pub w_k: DMatrix<f64>,
    pub w_v: DMatrix<f64>,
    pub w_o: DMatrix<f64>,
    pub w_gate: DMatrix<f64>,
    pub w_up: DMatrix<f64>,
    pub w_down: DMatrix<f64>,
    pub g_attn: DVector<f64>,
    pub g_ffn: DVector<f64>,
    pub num_heads: usize,
    pub head_dim: usize,
    pub eps: f64,
}

fn expect_shape(m: &DMatrix<f64>, rows: usize, cols: usize, name: &str) -> Result<()> {
    if m.shape() != (rows, cols) {
        return Err(domain(format!(
            "{name} is {}x{}, expected {rows}x{cols}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

impl TeacherLayer {
    pub fn width(&self) -> usize {
        self.w_q.nrows()
    }

    pub fn ffn_dim(&self) -> usize {
        self.w_up.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.width();
        let a = self.num_heads * self.head_dim;
        let f = self.ffn_dim();
        if d == 0 || a == 0 || f == 0 {
            return Err(domain("layer dimensions must be positive"));
        }
        expect_shape(&self.w_q, d, a, "W_q")?;
        expect_shape(&self.w_k, d, a, "W_k")?;
        expect_shape(&self.w_v, d, a, "W_v")?;
        expect_shape(&self.w_o, a, d, "W_o")?;
        expect_shape(&self.w_gate, d, f, "W_gate")?;
        expect_shape(&self.w_up, d, f, "W_up")?;
        expect_shape(&self.w_down, f, d, "W_down")?;
        if self.g_attn.len() != d || self.g_ffn.len() != d {
            return Err(domain("norm gains must match the layer width"));
        }
        if self.eps < 0.0 || !self.eps.is_finite() {
            return Err(domain("norm eps must be finite and nonnegative"));
        }
        Ok(())
    }

    /// Weights `N(0, 1/fan_in)`, gains `1 + N(0, 0.1²)`, eps `1e-6`.
    pub fn random<R: Rng + ?Sized>(
        d: usize,
        num_heads: usize,
        head_dim: usize,
        d_ff: usize,
        rng: &mut R,
    ) -> Self {
        let a = num_heads * head_dim;
        let sd = 1.0 / (d as f64).sqrt();
        Self {
            w_q: gaussian_matrix(d, a, sd, rng),
            w_k: gaussian_matrix(d, a, sd, rng),
            w_v: gaussian_matrix(d, a, sd, rng),
            w_o: gaussian_matrix(a, d, 1.0 / (a as f64).sqrt(), rng),
            w_gate: gaussian_matrix(d, d_ff, sd, rng),
            w_up: gaussian_matrix(d, d_ff, sd, rng),
            w_down: gaussian_matrix(d_ff, d, 1.0 / (d_ff as f64).sqrt(), rng),
            g_attn: random_gain(d, rng),
            g_ffn: random_gain(d, rng),
            num_heads,
            head_dim,
            eps: 1e-6,
        }
    }

    /// Attention branch on an already normalized input.
    fn attention(&self, h: &DMatrix<f64>) -> DMatrix<f64> {
        let l = h.nrows();
        let q = h * &self.w_q;
        let k = h * &self.w_k;
        let v = h * &self.w_v;
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut ctx = DMatrix::zeros(l, self.num_heads * self.head_dim);
        for head in 0..self.num_heads {
            let c0 = head * self.head_dim;
            let qh = q.columns(c0, self.head_dim);
            let kh = k.columns(c0, self.head_dim);
            let vh = v.columns(c0, self.head_dim);
            for i in 0..l {
                let scores: Vec<f64> = (0..=i)
                    .map(|j| qh.row(i).dot(&kh.row(j)) * scale)
                    .collect();
                let weights = softmax(&scores);
                for (j, w) in weights.iter().enumerate() {
                    for c in 0..self.head_dim {
                        ctx[(i, c0 + c)] += w * vh[(j, c)];
                    }
                }
            }
        }
        ctx * &self.w_o
    }

    /// FFN branch on an already normalized input.
    fn ffn(&self, h: &DMatrix<f64>) -> DMatrix<f64> {
        let gate = (h * &self.w_gate).map(silu);
        let up = h * &self.w_up;
        gate.component_mul(&up) * &self.w_down
    }

    fn block(&self, x: &DMatrix<f64>) -> BlockOutput {
        let h = x + self.attention(&rmsnorm_rows(x, &self.g_attn, self.eps));
        let y = &h + self.ffn(&rmsnorm_rows(&h, &self.g_ffn, self.eps));
        BlockOutput {
            after_attention: h,
            output: y,
        }
    }
}

fn random_gain<R: Rng + ?Sized>(d: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(d, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        1.0 + 0.1 * z
    })
}

/// Residual stream after the attention sublayer and after the whole block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockOutput {
    pub after_attention: DMatrix<f64>,
    pub output: DMatrix<f64>,
}

fn check_input(x: &DMatrix<f64>, width: usize) -> Result<()> {
    if x.ncols() != width {
        return Err(domain(format!(
            "input width {} does not match layer width {width}",
            x.ncols()
        )));
    }
    if x.nrows() == 0 {
        return Err(domain("input has no tokens"));
    }
    Ok(())
}

/// Runs the stack on one causal sequence, returning every block's output.
pub fn teacher_forward(x: &DMatrix<f64>, layers: &[TeacherLayer]) -> Result<Vec<BlockOutput>> {
    let mut cur = x.clone();
    let mut outs = Vec::with_capacity(layers.len());
    for layer in layers {
        layer.validate()?;
        check_input(&cur, layer.width())?;
        let out = layer.block(&cur);
        cur = out.output.clone();
        outs.push(out);
    }
    Ok(outs)
}

/// Frozen teacher block run at student width through projection pairs:
/// `H′ = X′ + Attn(Norm′_a(X′) O_a) Q_a`, `Y′ = H′ + FFN(Norm′_f(H′) O_f) Q_f`.
#[derive(Debug, Clone, PartialEq)]
pub struct WrappedLayer {
    pub teacher: TeacherLayer,
    pub g_attn: DVector<f64>,
    pub g_ffn: DVector<f64>,
    /// `D′ × D` up-projections.
    pub o_attn: DMatrix<f64>,
    pub o_ffn: DMatrix<f64>,
    /// `D × D′` down-projections.
    pub q_attn: DMatrix<f64>,
    pub q_ffn: DMatrix<f64>,
}

/// How student norm gains start.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GainInit {
    Ones,
    /// Teacher gains on the selected channels times `√(D/D′)`, which makes
    /// `Norm′(x_G)` the restriction of `Norm(x)` for `x` supported on `G`
    /// when eps is 0.
    Matched,
}

impl WrappedLayer {
    pub fn width(&self) -> usize {
        self.o_attn.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        self.teacher.validate()?;
        let d = self.teacher.width();
        let dp = self.width();
        expect_shape(&self.o_attn, dp, d, "O_a")?;
        expect_shape(&self.o_ffn, dp, d, "O_f")?;
        expect_shape(&self.q_attn, d, dp, "Q_a")?;
        expect_shape(&self.q_ffn, d, dp, "Q_f")?;
        if self.g_attn.len() != dp || self.g_ffn.len() != dp {
            return Err(domain("student gains must have the student width"));
        }
        Ok(())
    }

    /// `O = Hᵀ`, `Q = H` for the channel-selection matrix `H`.
    pub fn from_selection(teacher: TeacherLayer, sel: &ChannelSelection, gains: GainInit) -> Result<Self> {
        let d = teacher.width();
        if sel.dim() != d {
            return Err(domain("selection width does not match the teacher"));
        }
        let dp = sel.len();
        let mut h = DMatrix::zeros(d, dp);
        for (j, &i) in sel.indices().iter().enumerate() {
            h[(i, j)] = 1.0;
        }
        let (g_attn, g_ffn) = match gains {
            GainInit::Ones => (DVector::from_element(dp, 1.0), DVector::from_element(dp, 1.0)),
            GainInit::Matched => {
                let s = (d as f64 / dp as f64).sqrt();
                let pick = |g: &DVector<f64>| {
                    DVector::from_iterator(dp, sel.indices().iter().map(|&i| g[i] * s))
                };
                (pick(&teacher.g_attn), pick(&teacher.g_ffn))
            }
        };
        Ok(Self {
            g_attn,
            g_ffn,
            o_attn: h.transpose(),
            o_ffn: h.transpose(),
            q_attn: h.clone(),
            q_ffn: h,
            teacher,
        })
    }

    /// Random projections `N(0, 1/fan_in)` and gains near one.
    pub fn random<R: Rng + ?Sized>(teacher: TeacherLayer, dprime: usize, rng: &mut R) -> Self {
        let d = teacher.width();
        let so = 1.0 / (dprime as f64).sqrt();
        let sq = 1.0 / (d as f64).sqrt();
        Self {
            g_attn: random_gain(dprime, rng),
            g_ffn: random_gain(dprime, rng),
            o_attn: gaussian_matrix(dprime, d, so, rng),
            o_ffn: gaussian_matrix(dprime, d, so, rng),
            q_attn: gaussian_matrix(d, dprime, sq, rng),
            q_ffn: gaussian_matrix(d, dprime, sq, rng),
            teacher,
        }
    }

    fn block(&self, x: &DMatrix<f64>) -> BlockOutput {
        let eps = self.teacher.eps;
        let up = rmsnorm_rows(x, &self.g_attn, eps) * &self.o_attn;
        let h = x + self.teacher.attention(&up) * &self.q_attn;
        let up = rmsnorm_rows(&h, &self.g_ffn, eps) * &self.o_ffn;
        let y = &h + self.teacher.ffn(&up) * &self.q_ffn;
        BlockOutput {
            after_attention: h,
            output: y,
        }
    }
}

pub fn wrapped_forward(x: &DMatrix<f64>, layers: &[WrappedLayer]) -> Result<Vec<BlockOutput>> {
    let mut cur = x.clone();
    let mut outs = Vec::with_capacity(layers.len());
    for layer in layers {
        layer.validate()?;
        check_input(&cur, layer.width())?;
        let out = layer.block(&cur);
        cur = out.output.clone();
        outs.push(out);
    }
    Ok(outs)
}

/// A native width-`D′` block obtained by absorbing the projections.
#[derive(Debug, Clone, PartialEq)]
pub struct MergedLayer {
    pub block: TeacherLayer,
}

/// `W̃_{q,k,v} = O_a W`, `W̃_{gate,up} = O_f W`, `W̃_o = W_o Q_a`,
/// `W̃_down = W_down Q_f`; gains are the student gains.
pub fn merge(w: &WrappedLayer) -> MergedLayer {
    let t = &w.teacher;
    MergedLayer {
        block: TeacherLayer {
            w_q: &w.o_attn * &t.w_q,
            w_k: &w.o_attn * &t.w_k,
            w_v: &w.o_attn * &t.w_v,
            w_o: &t.w_o * &w.q_attn,
            w_gate: &w.o_ffn * &t.w_gate,
            w_up: &w.o_ffn * &t.w_up,
            w_down: &t.w_down * &w.q_ffn,
            g_attn: w.g_attn.clone(),
            g_ffn: w.g_ffn.clone(),
            num_heads: t.num_heads,
            head_dim: t.head_dim,
            eps: t.eps,
        },
    }
}

pub fn merged_forward(x: &DMatrix<f64>, layers: &[MergedLayer]) -> Result<Vec<BlockOutput>> {
    let blocks: Vec<TeacherLayer> = layers.iter().map(|m| m.block.clone()).collect();
    teacher_forward(x, &blocks)
}

/// Embedding and unembedding adapters of a width-reduced student: the
/// teacher's embedding output is mapped down by `embed_down` (`D × D′`) and
/// the final student state is mapped back by `unembed_up` (`D′ × D`) before
/// the teacher's final norm.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingAdapters {
    pub embed_down: DMatrix<f64>,
    pub unembed_up: DMatrix<f64>,
}

impl EmbeddingAdapters {
    pub fn from_selection(sel: &ChannelSelection) -> Self {
        let mut h = DMatrix::zeros(sel.dim(), sel.len());
        for (j, &i) in sel.indices().iter().enumerate() {
            h[(i, j)] = 1.0;
        }
        Self {
            unembed_up: h.transpose(),
            embed_down: h,
        }
    }

    pub fn embed(&self, x0: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_input(x0, self.embed_down.nrows())?;
        Ok(x0 * &self.embed_down)
    }

    pub fn unembed(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_input(x, self.unembed_up.nrows())?;
        Ok(x * &self.unembed_up)
    }
}

/// `(1/L) ‖X − X′‖_F²`.
pub fn rep_align_loss(teacher: &DMatrix<f64>, student: &DMatrix<f64>) -> Result<f64> {
    if teacher.shape() != student.shape() {
        return Err(domain("representation shapes differ"));
    }
    Ok((teacher - student).norm_squared() / teacher.nrows() as f64)
}

/// Mean negative log-likelihood of `targets` under row-wise softmax.
pub fn lm_loss(logits: &DMatrix<f64>, targets: &[usize]) -> Result<f64> {
    if targets.len() != logits.nrows() {
        return Err(domain("one target per position required"));
    }
    let voc = logits.ncols();
    let mut total = 0.0;
    for (l, &t) in targets.iter().enumerate() {
        if t >= voc {
            return Err(domain(format!("target {t} out of range for vocab {voc}")));
        }
        let row = row_vec(logits, l);
        total += log_sum_exp(&row) - row[t];
    }
    Ok((total / targets.len() as f64).max(0.0))
}

/// `(1/L) Σ_l KL(softmax(Z/τ) ‖ softmax(Z′/τ))`, teacher first.
pub fn kl_loss(teacher: &DMatrix<f64>, student: &DMatrix<f64>, tau: f64) -> Result<f64> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(domain("temperature must be positive"));
    }
    if teacher.shape() != student.shape() {
        return Err(domain("logit shapes differ"));
    }
    let mut total = 0.0;
    for l in 0..teacher.nrows() {
        let zt: Vec<f64> = teacher.row(l).iter().map(|z| z / tau).collect();
        let zs: Vec<f64> = student.row(l).iter().map(|z| z / tau).collect();
        let (lt, ls) = (log_sum_exp(&zt), log_sum_exp(&zs));
        total += zt
            .iter()
            .zip(&zs)
            .map(|(a, b)| {
                let log_p = a - lt;
                log_p.exp() * (log_p - (b - ls))
            })
            .sum::<f64>();
    }
    Ok((total / teacher.nrows() as f64).max(0.0))
}

/// Contents of a weights file.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerStack {
    Teacher(Vec<TeacherLayer>),
    Wrapped(Vec<WrappedLayer>),
}

fn put_matrix(w: &mut impl Write, m: &DMatrix<f64>) -> Result<()> {
    put_f32s(w, F32Matrix::from_dmatrix(m).as_slice())
}

fn put_vector(w: &mut impl Write, v: &DVector<f64>) -> Result<()> {
    let vals: Vec<f32> = v.iter().map(|&x| x as f32).collect();
    put_f32s(w, &vals)
}

/// Writes a layer stack:
///
/// ```text
/// "EDAW" | u32 version=1 | u8 kind (0 teacher, 1 wrapped) | u32 N | u32 D
///        | u32 D′ | u32 heads | u32 head_dim | u32 d_ff | f32 eps
/// per layer: W_q W_k W_v (D×A) | W_o (A×D) | W_gate W_up (D×F) | W_down (F×D)
///            | g_a g_f (D)
///   wrapped: g′_a g′_f (D′) | O_a O_f (D′×D) | Q_a Q_f (D×D′)
/// ```
///
/// All matrices are `f32` row-major, little-endian; every layer shares the
/// header dimensions.
pub fn write_weights(stack: &LayerStack, sink: &mut impl Write) -> Result<()> {
    let (teachers, wrapped): (Vec<&TeacherLayer>, Option<&[WrappedLayer]>) = match stack {
        LayerStack::Teacher(ls) => (ls.iter().collect(), None),
        LayerStack::Wrapped(ls) => (ls.iter().map(|w| &w.teacher).collect(), Some(ls)),
    };
    let first = teachers
        .first()
        .ok_or_else(|| Error::Format("weights file needs at least one layer".into()))?;
    let dp = wrapped.map_or(first.width(), |w| w[0].width());
    for (i, t) in teachers.iter().enumerate() {
        t.validate()?;
        if t.width() != first.width()
            || t.num_heads != first.num_heads
            || t.head_dim != first.head_dim
            || t.ffn_dim() != first.ffn_dim()
            || t.eps != first.eps
        {
            return Err(Error::Format(format!("layer {i} dimensions differ from layer 0")));
        }
    }
    if let Some(ws) = wrapped {
        for (i, w) in ws.iter().enumerate() {
            w.validate()?;
            if w.width() != dp {
                return Err(Error::Format(format!("layer {i} student width differs")));
            }
        }
    }
    sink.write_all(WEIGHTS_MAGIC)?;
    sink.write_all(&WEIGHTS_VERSION.to_le_bytes())?;
    sink.write_all(&[u8::from(wrapped.is_some())])?;
    put_u32(sink, teachers.len())?;
    put_u32(sink, first.width())?;
    put_u32(sink, dp)?;
    put_u32(sink, first.num_heads)?;
    put_u32(sink, first.head_dim)?;
    put_u32(sink, first.ffn_dim())?;
    put_f32s(sink, &[first.eps as f32])?;
    for (i, t) in teachers.iter().enumerate() {
        for m in [&t.w_q, &t.w_k, &t.w_v, &t.w_o, &t.w_gate, &t.w_up, &t.w_down] {
            put_matrix(sink, m)?;
        }
        put_vector(sink, &t.g_attn)?;
        put_vector(sink, &t.g_ffn)?;
        if let Some(ws) = wrapped {
            let w = &ws[i];
            put_vector(sink, &w.g_attn)?;
            put_vector(sink, &w.g_ffn)?;
            for m in [&w.o_attn, &w.o_ffn, &w.q_attn, &w.q_ffn] {
                put_matrix(sink, m)?;
            }
        }
    }
    sink.flush()?;
    Ok(())
}

pub fn read_weights(source: impl Read) -> Result<LayerStack> {
    let mut cur = Cursor::new(source);
    let magic = cur
        .bytes(4, &|| "magic".into())
        .map_err(|_| Error::UnsupportedFormat("missing magic bytes".into()))?;
    if magic.as_slice() != WEIGHTS_MAGIC {
        return Err(Error::UnsupportedFormat(format!("bad magic {magic:?}")));
    }
    let header = || "weights header".to_string();
    let version = cur.u32(&header)?;
    if version != WEIGHTS_VERSION {
        return Err(Error::UnsupportedFormat(format!("weights version {version}")));
    }
    let kind = cur.u8(&header)?;
    if kind > 1 {
        return Err(Error::CorruptDump(format!("unknown weights kind {kind}")));
    }
    let n = cur.u32(&header)? as usize;
    let d = cur.u32(&header)? as usize;
    let dp = cur.u32(&header)? as usize;
    let heads = cur.u32(&header)? as usize;
    let hd = cur.u32(&header)? as usize;
    let ff = cur.u32(&header)? as usize;
    let eps = f64::from(cur.f32s(1, &header)?[0]);
    if n == 0 || d == 0 || dp == 0 || heads == 0 || hd == 0 || ff == 0 {
        return Err(Error::Format("weights header has a zero dimension".into()));
    }
    let a = heads * hd;
    let mut teachers = Vec::with_capacity(n.min(1024));
    let mut wrapped = Vec::new();
    for i in 0..n {
        let mut mat = |r: usize, c: usize, name: &str| -> Result<DMatrix<f64>> {
            Ok(cur
                .matrix(r, c, &|| format!("layer {i} {name}"))?
                .to_dmatrix())
        };
        let w_q = mat(d, a, "W_q")?;
        let w_k = mat(d, a, "W_k")?;
        let w_v = mat(d, a, "W_v")?;
        let w_o = mat(a, d, "W_o")?;
        let w_gate = mat(d, ff, "W_gate")?;
        let w_up = mat(d, ff, "W_up")?;
        let w_down = mat(ff, d, "W_down")?;
        let g_attn = DVector::from_column_slice(mat(d, 1, "g_a")?.as_slice());
        let g_ffn = DVector::from_column_slice(mat(d, 1, "g_f")?.as_slice());
        let teacher = TeacherLayer {
            w_q,
            w_k,
            w_v,
            w_o,
            w_gate,
            w_up,
            w_down,
            g_attn,
            g_ffn,
            num_heads: heads,
            head_dim: hd,
            eps,
        };
        if kind == 1 {
            let sg_a = DVector::from_column_slice(mat(dp, 1, "student g_a")?.as_slice());
            let sg_f = DVector::from_column_slice(mat(dp, 1, "student g_f")?.as_slice());
            let o_attn = mat(dp, d, "O_a")?;
            let o_ffn = mat(dp, d, "O_f")?;
            let q_attn = mat(d, dp, "Q_a")?;
            let q_ffn = mat(d, dp, "Q_f")?;
            wrapped.push(WrappedLayer {
                teacher,
                g_attn: sg_a,
                g_ffn: sg_f,
                o_attn,
                o_ffn,
                q_attn,
                q_ffn,
            });
        } else {
            teachers.push(teacher);
        }
    }
    let all_finite = |m: &DMatrix<f64>| m.iter().all(|v| v.is_finite());
    let check = |t: &TeacherLayer| {
        [&t.w_q, &t.w_k, &t.w_v, &t.w_o, &t.w_gate, &t.w_up, &t.w_down]
            .into_iter()
            .all(all_finite)
            && t.g_attn.iter().chain(t.g_ffn.iter()).all(|v| v.is_finite())
    };
    if kind == 1 {
        for w in &wrapped {
            let ok = check(&w.teacher)
                && [&w.o_attn, &w.o_ffn, &w.q_attn, &w.q_ffn].into_iter().all(all_finite)
                && w.g_attn.iter().chain(w.g_ffn.iter()).all(|v| v.is_finite());
            if !ok {
                return Err(Error::Data("non-finite weight".into()));
            }
        }
        Ok(LayerStack::Wrapped(wrapped))
    } else {
        if !teachers.iter().all(check) {
            return Err(Error::Data("non-finite weight".into()));
        }
        Ok(LayerStack::Teacher(teachers))
    }
}

/// `‖a − b‖_F / ‖a‖_F`, or the absolute difference when `a` vanishes.
pub fn relative_error(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let diff = (a - b).norm();
    let base = a.norm();
    if base > 0.0 {
        diff / base
    } else {
        diff
    }
}
