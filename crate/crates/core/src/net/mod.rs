//! The unfolded DSCS network.
//!
//! Each stage mirrors one ADMM iteration on the measurement operator
//! `A = ΦH` (PSF blur, then block averaging): a closed-form x-update with a
//! learned penalty `ρ`, a z-update that
//! passes `x + β` through a dynamic convolution, SiLU, a second convolution
//! and a learned soft threshold, and the multiplier update. A final layer
//! replaces `Φᵀy` with the history-fusing DIR branch and shrinks
//! `δ = β − z` with DTG per-pixel thresholds before one last x-update.
//!
//! The network runs on `y·c²/s` with operator `c²A` and multiplies its
//! output by `s`, where `s` is [`NetConfig::intensity_scale`], so that
//! activations stay near unit range for intensities in the hundreds.

mod checkpoint;
mod forward;

use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};

use rand::Rng as _;

use crate::autodiff::{DenseMap, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::grid::{HighResGrid, Measurement};
use crate::operator::DenseOperator;
use crate::rng;
use crate::scene::{ForwardModel, SceneConfig};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointFiles};
pub use forward::{Forward, Inputs, StageState, StageVars, Trace};

#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    pub rows: usize,
    pub cols: usize,
    pub ratio: usize,
    /// PSF standard deviation of the measurement operator, observed pixels.
    pub sigma_psf: f64,
    /// Number of unfolded stages `N_s`.
    pub stages: usize,
    /// DIR history length `m`.
    pub history: usize,
    /// Last stage whose `z` enters the DIR window.
    pub dir_pos: usize,
    /// Blend between the attention kernel and the static kernel.
    pub dyn_weight: f64,
    /// Channels inside each stage.
    pub features: usize,
    /// Basis kernels of the dynamic convolution.
    pub bases: usize,
    /// Hidden width of the attention perceptron.
    pub attn_hidden: usize,
    /// Channels inside DTG and DIR.
    pub aux_features: usize,
    pub use_dynamic: bool,
    pub use_dtg: bool,
    pub use_dir: bool,
    pub intensity_scale: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            rows: 11,
            cols: 11,
            ratio: 3,
            sigma_psf: 0.75,
            stages: 6,
            history: 3,
            dir_pos: 3,
            dyn_weight: 0.7,
            features: 16,
            bases: 4,
            attn_hidden: 4,
            aux_features: 8,
            use_dynamic: true,
            use_dtg: true,
            use_dir: true,
            intensity_scale: 100.0,
        }
    }
}

impl NetConfig {
    pub fn for_scene(scene: &SceneConfig) -> Self {
        NetConfig {
            rows: scene.rows,
            cols: scene.cols,
            ratio: scene.ratio,
            sigma_psf: scene.sigma_psf,
            ..NetConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.rows == 0 || self.cols == 0 || self.ratio == 0 || self.ratio.is_multiple_of(2) {
            return bad(format!(
                "invalid geometry {}x{} with ratio {}",
                self.rows, self.cols, self.ratio
            ));
        }
        if !(self.sigma_psf > 0.0) || !self.sigma_psf.is_finite() {
            return bad(format!(
                "sigma_psf must be positive, got {}",
                self.sigma_psf
            ));
        }
        if self.stages == 0 {
            return bad("at least one stage is required".into());
        }
        if self.dir_pos == 0 || self.dir_pos > self.stages {
            return bad(format!(
                "DIR position must lie in 1..={}, got {}",
                self.stages, self.dir_pos
            ));
        }
        if self.history == 0 || self.history > self.dir_pos {
            return bad(format!(
                "DIR history must lie in 1..={} (the DIR position), got {}",
                self.dir_pos, self.history
            ));
        }
        if !(0.0..=1.0).contains(&self.dyn_weight) {
            return bad(format!(
                "dynamic weight must lie in [0, 1], got {}",
                self.dyn_weight
            ));
        }
        if self.features == 0 || self.bases == 0 || self.attn_hidden == 0 || self.aux_features == 0
        {
            return bad("channel counts must be >= 1".into());
        }
        if !(self.intensity_scale > 0.0) || !self.intensity_scale.is_finite() {
            return bad(format!(
                "intensity scale must be > 0, got {}",
                self.intensity_scale
            ));
        }
        Ok(())
    }

    pub fn high_res_dims(&self) -> (usize, usize) {
        (self.rows * self.ratio, self.cols * self.ratio)
    }

    /// Factor applied to measurements before they enter the network.
    pub fn input_scale(&self) -> f64 {
        (self.ratio * self.ratio) as f64 / self.intensity_scale
    }

    /// Scene whose forward model the network inverts.
    pub fn scene(&self) -> SceneConfig {
        SceneConfig {
            rows: self.rows,
            cols: self.cols,
            ratio: self.ratio,
            sigma_psf: self.sigma_psf,
            ..SceneConfig::default()
        }
    }
}

/// Fixed operator data: `Ã = c²A` and its factorization
/// `ÃÃᵀ = U diag(s) Uᵀ`, stored as `W = UᵀÃ` and `s`.
#[derive(PartialEq)]
pub struct Operator {
    pub(crate) a: Arc<DenseMap>,
    pub(crate) w: Arc<DenseMap>,
    pub(crate) s: Tensor,
}

impl Operator {
    pub fn new(cfg: &NetConfig) -> Result<Self> {
        let dense = DenseOperator::materialize(&ForwardModel::new(cfg.scene())?)?;
        let a = dense.matrix() * (cfg.ratio * cfg.ratio) as f64;
        let eig = SymmetricEigen::new(&a * a.transpose());
        let w: DMatrix<f64> = eig.eigenvectors.transpose() * &a;
        Ok(Operator {
            a: Arc::new(row_major(&a)?),
            w: Arc::new(row_major(&w)?),
            s: Tensor::from_vec(
                vec![eig.eigenvalues.len()],
                eig.eigenvalues.iter().map(|v| v.max(0.0)).collect(),
            )?,
        })
    }

    /// `Ã` as a row-major map.
    pub fn matrix(&self) -> &DenseMap {
        &self.a
    }
}

impl std::fmt::Debug for Operator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Operator({}x{})", self.a.rows(), self.a.cols())
    }
}

fn row_major(m: &DMatrix<f64>) -> Result<DenseMap> {
    DenseMap::new(m.nrows(), m.ncols(), m.transpose().as_slice().to_vec())
}

/// How a parameter is initialized.
#[derive(Debug, Clone, Copy)]
enum Init {
    /// Symmetric uniform with variance `1/fan_in`.
    Uniform {
        fan_in: usize,
    },
    Const(f64),
}

/// Inverse of `softplus`.
pub fn softplus_inv(v: f64) -> f64 {
    if v > 30.0 {
        v
    } else {
        v.exp_m1().ln()
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl Params {
    fn new() -> Self {
        Params {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    fn push(&mut self, name: String, t: Tensor) {
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.tensors[i])
    }

    /// Replaces a parameter; the shape must match.
    pub fn set(&mut self, name: &str, t: Tensor) -> Result<()> {
        let i = self
            .position(name)
            .ok_or_else(|| Error::InvalidParameter(format!("no parameter named {name}")))?;
        if t.shape() != self.tensors[i].shape() {
            return Err(Error::Shape(format!(
                "{name}: expected {:?}, got {:?}",
                self.tensors[i].shape(),
                t.shape()
            )));
        }
        self.tensors[i] = t;
        Ok(())
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Rounds every value to the nearest `f32` so checkpoints are exact.
    pub fn round_to_f32(&mut self) {
        for t in &mut self.tensors {
            t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }
}

/// Parameter layout for a configuration, in checkpoint order.
fn layout(cfg: &NetConfig) -> Vec<(String, Vec<usize>, Init)> {
    let l = cfg.features;
    let a = cfg.aux_features;
    let mut out = Vec::new();
    let mut add = |name: String, shape: Vec<usize>, init: Init| out.push((name, shape, init));
    for k in 1..=cfg.stages {
        let p = format!("stage{k}");
        add(format!("{p}.rho"), vec![1], Init::Const(softplus_inv(1.0)));
        add(
            format!("{p}.theta"),
            vec![1],
            Init::Const(softplus_inv(0.01)),
        );
        if k > 1 {
            add(format!("{p}.mu1"), vec![1], Init::Const(0.9));
        }
        add(format!("{p}.mu2"), vec![1], Init::Const(0.1));
        add(
            format!("{p}.c1.static"),
            vec![l, 1, 3, 3],
            Init::Uniform { fan_in: 9 },
        );
        add(format!("{p}.c1.bias"), vec![l], Init::Const(0.0));
        if cfg.use_dynamic {
            add(
                format!("{p}.c1.basis"),
                vec![cfg.bases, l * 9],
                Init::Uniform { fan_in: 9 },
            );
            add(
                format!("{p}.attn.w1"),
                vec![1, cfg.attn_hidden],
                Init::Uniform { fan_in: 1 },
            );
            add(
                format!("{p}.attn.b1"),
                vec![1, cfg.attn_hidden],
                Init::Const(0.0),
            );
            add(
                format!("{p}.attn.w2"),
                vec![cfg.attn_hidden, cfg.bases],
                Init::Uniform {
                    fan_in: cfg.attn_hidden,
                },
            );
            add(format!("{p}.attn.b2"), vec![1, cfg.bases], Init::Const(0.0));
        }
        add(
            format!("{p}.c2.weight"),
            vec![1, l, 3, 3],
            Init::Uniform { fan_in: 9 * l },
        );
        add(format!("{p}.c2.bias"), vec![1], Init::Const(0.0));
    }
    if cfg.use_dtg {
        add(
            "dtg.feat.weight".into(),
            vec![a, 1, 3, 3],
            Init::Uniform { fan_in: 9 },
        );
        add("dtg.feat.bias".into(), vec![a], Init::Const(0.0));
        for b in ["a", "b"] {
            add(
                format!("dtg.branch_{b}.weight"),
                vec![a.div_ceil(2), a, 3, 3],
                Init::Uniform { fan_in: 9 * a },
            );
            add(
                format!("dtg.branch_{b}.bias"),
                vec![a.div_ceil(2)],
                Init::Const(0.0),
            );
        }
        add(
            "dtg.att.weight".into(),
            vec![1, 2, 3, 3],
            Init::Uniform { fan_in: 18 },
        );
        add(
            "dtg.att.bias".into(),
            vec![1],
            Init::Const(softplus_inv(1e-3)),
        );
    }
    if cfg.use_dir {
        for i in 0..cfg.history {
            add(
                format!("dir.hist{i}.weight"),
                vec![1, 1, 3, 3],
                Init::Uniform { fan_in: 9 },
            );
            add(format!("dir.hist{i}.bias"), vec![1], Init::Const(0.0));
        }
        add("dir.fusion".into(), vec![1, cfg.history], Init::Const(0.0));
        add(
            "dir.inp1.weight".into(),
            vec![a, 1, 3, 3],
            Init::Uniform { fan_in: 9 },
        );
        add("dir.inp1.bias".into(), vec![a], Init::Const(0.0));
        add(
            "dir.inp2.weight".into(),
            vec![a, a, 3, 3],
            Init::Uniform { fan_in: 9 * a },
        );
        add("dir.inp2.bias".into(), vec![a], Init::Const(0.0));
        add(
            "dir.fuse1.weight".into(),
            vec![a, a + 1, 3, 3],
            Init::Uniform {
                fan_in: 9 * (a + 1),
            },
        );
        add("dir.fuse1.bias".into(), vec![a], Init::Const(0.0));
        add(
            "dir.fuse2.weight".into(),
            vec![1, a, 3, 3],
            Init::Uniform { fan_in: 9 * a },
        );
        add("dir.fuse2.bias".into(), vec![1], Init::Const(0.0));
    }
    add("final.rho".into(), vec![1], Init::Const(softplus_inv(1.0)));
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    cfg: NetConfig,
    params: Params,
    op: Arc<Operator>,
}

impl Network {
    /// Fresh parameters drawn from a stream keyed by `seed`.
    pub fn new(cfg: NetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng::stream(rng::derive(seed, "net-init"), 0);
        let mut params = Params::new();
        for (name, shape, init) in layout(&cfg) {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Const(v) => vec![v; n],
                Init::Uniform { fan_in } => {
                    let b = (3.0 / fan_in as f64).sqrt();
                    (0..n).map(|_| r.random_range(-b..b)).collect()
                }
            };
            params.push(name, Tensor::from_vec(shape, data)?);
        }
        params.round_to_f32();
        let op = Arc::new(Operator::new(&cfg)?);
        Ok(Network { cfg, params, op })
    }

    /// All parameters zero except the named constants; used by loaders.
    fn zeroed(cfg: NetConfig) -> Result<Self> {
        cfg.validate()?;
        let mut params = Params::new();
        for (name, shape, _) in layout(&cfg) {
            params.push(name, Tensor::zeros(&shape));
        }
        let op = Arc::new(Operator::new(&cfg)?);
        Ok(Network { cfg, params, op })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn operator(&self) -> &Operator {
        &self.op
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    /// Registers every parameter on `tape`; trainable ones receive grads.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params
            .tensors
            .iter()
            .map(|t| tape.leaf(t.clone(), trainable))
            .collect()
    }

    /// Reconstruction in intensity units.
    pub fn predict(&self, y: &Measurement) -> Result<HighResGrid> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let out = self.forward(&mut tape, &vars, y)?;
        let (n1, n2) = self.cfg.high_res_dims();
        HighResGrid::from_vec(n1, n2, tape.value(out.output).data().to_vec())
    }

    /// Per-sample squared-error loss `Σ(pred − gt)²/N` and its gradient with
    /// respect to every parameter, in parameter order.
    pub fn loss_and_grad(
        &self,
        y: &Measurement,
        truth: &HighResGrid,
    ) -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, true);
        let out = self.forward(&mut tape, &vars, y)?;
        let (n1, n2) = self.cfg.high_res_dims();
        if truth.dims() != (n1, n2) {
            return Err(Error::DimensionMismatch(format!(
                "truth is {:?}, expected {n1}x{n2}",
                truth.dims()
            )));
        }
        let gt = tape.constant(Tensor::from_vec(
            vec![1, 1, n1, n2],
            truth.as_slice().to_vec(),
        )?);
        let diff = tape.sub(out.output, gt)?;
        let sq = tape.sum_squares(diff);
        let loss = tape.scale(sq, 1.0 / (n1 * n2) as f64);
        tape.backward(loss)?;
        let grads = vars
            .iter()
            .zip(&self.params.tensors)
            .map(|(&v, t)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        Ok((tape.value(loss).item(), grads))
    }
}
