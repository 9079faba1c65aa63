//! Forward graph construction.

use super::Network;
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::grid::Measurement;

/// Tape handles of one stage's outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageVars {
    pub x: Var,
    pub z: Var,
    pub beta: Var,
}

/// Tape handles produced by [`Network::forward`].
#[derive(Debug, Clone)]
pub struct Forward {
    /// Reconstruction in intensity units.
    pub output: Var,
    /// Final x-update before clamping and rescaling.
    pub x_final: Var,
    pub stages: Vec<StageVars>,
}

/// Values of one stage in network units.
#[derive(Debug, Clone, PartialEq)]
pub struct StageState {
    pub x: Vec<f64>,
    pub z: Vec<f64>,
    pub beta: Vec<f64>,
}

/// Every intermediate state of a forward pass, in network units.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub stages: Vec<StageState>,
    pub x_final: Vec<f64>,
    pub output: Vec<f64>,
}

/// Inputs shared by every stage.
#[derive(Debug, Clone, Copy)]
pub struct Inputs {
    /// Nearest-neighbour upsampled scaled measurement.
    pub inp: Var,
    /// `Ãᵀy` of the scaled measurement.
    pub aty: Var,
}

impl Network {
    fn p(&self, vars: &[Var], name: &str) -> Var {
        vars[self
            .params
            .position(name)
            .unwrap_or_else(|| panic!("parameter {name} missing from layout"))]
    }

    /// Scales `y` and lifts it to the sub-pixel grid. The initial `x` is
    /// `inp`; `z` and `β` start at zero.
    pub fn init_layer(&self, tape: &mut Tape, y: &Measurement) -> Result<Inputs> {
        let c = &self.cfg;
        if y.dims() != (c.rows, c.cols) {
            return Err(Error::DimensionMismatch(format!(
                "measurement is {:?}, network expects {}x{}",
                y.dims(),
                c.rows,
                c.cols
            )));
        }
        let s = c.input_scale();
        let data = y.as_slice().iter().map(|v| v * s).collect();
        let yv = tape.constant(Tensor::from_vec(vec![1, 1, c.rows, c.cols], data)?);
        let inp = tape.upsample(yv, c.ratio)?;
        let (n1, n2) = c.high_res_dims();
        let aty = tape.linear(yv, &self.op.a, true, &[1, 1, n1, n2])?;
        Ok(Inputs { inp, aty })
    }

    /// `(ÃᵀÃ + ρI)⁻¹ r` for a learned scalar `ρ`, by Woodbury on the
    /// measurement side: `(r − Wᵀ diag(1/(ρ + s)) W r)/ρ`.
    pub fn shifted_solve(&self, tape: &mut Tape, r: Var, rho: Var) -> Result<Var> {
        let m = self.op.w.rows();
        let shape = tape.shape(r).to_vec();
        let v = tape.linear(r, &self.op.w, false, &[m])?;
        let s = tape.constant(self.op.s.clone());
        let shifted = tape.add_scalar(s, rho)?;
        let inv = tape.recip(shifted);
        let q = tape.mul(v, inv)?;
        let back = tape.linear(q, &self.op.w, true, &shape)?;
        let d = tape.sub(r, back)?;
        let inv_rho = tape.recip(rho);
        tape.mul_scalar(d, inv_rho)
    }

    /// C1 with a kernel blended from the attention-weighted basis and the
    /// static kernel.
    pub fn dynamic_conv(&self, tape: &mut Tape, vars: &[Var], stage: usize, u: Var) -> Result<Var> {
        let pre = format!("stage{stage}");
        let stat = self.p(vars, &format!("{pre}.c1.static"));
        let bias = self.p(vars, &format!("{pre}.c1.bias"));
        let kernel = if self.cfg.use_dynamic {
            let gap = tape.global_avg_pool(u)?;
            let h = tape.matmul(gap, self.p(vars, &format!("{pre}.attn.w1")))?;
            let h = tape.add(h, self.p(vars, &format!("{pre}.attn.b1")))?;
            let h = tape.silu(h);
            let a = tape.matmul(h, self.p(vars, &format!("{pre}.attn.w2")))?;
            let a = tape.add(a, self.p(vars, &format!("{pre}.attn.b2")))?;
            let attn = tape.softmax(a)?;
            let mixed = tape.matmul(attn, self.p(vars, &format!("{pre}.c1.basis")))?;
            let mixed = tape.reshape(mixed, &[self.cfg.features, 1, 3, 3])?;
            let alpha = self.cfg.dyn_weight;
            let d = tape.scale(mixed, alpha);
            let s = tape.scale(stat, 1.0 - alpha);
            tape.add(d, s)?
        } else {
            stat
        };
        tape.conv2d(u, kernel, Some(bias), 1)
    }

    /// One unfolded ADMM iteration.
    pub fn stage_forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        stage: usize,
        inputs: &Inputs,
        z: Var,
        beta: Var,
    ) -> Result<StageVars> {
        let pre = format!("stage{stage}");
        let rho_raw = self.p(vars, &format!("{pre}.rho"));
        let rho = tape.softplus(rho_raw);
        let zb = tape.sub(z, beta)?;
        let rzb = tape.mul_scalar(zb, rho)?;
        let r = tape.add(inputs.aty, rzb)?;
        let x = self.shifted_solve(tape, r, rho)?;

        let u = tape.add(x, beta)?;
        let c1 = self.dynamic_conv(tape, vars, stage, u)?;
        let act = tape.silu(c1);
        let c2 = tape.conv2d(
            act,
            self.p(vars, &format!("{pre}.c2.weight")),
            Some(self.p(vars, &format!("{pre}.c2.bias"))),
            1,
        )?;
        let theta_raw = self.p(vars, &format!("{pre}.theta"));
        let theta = tape.softplus(theta_raw);
        let shrunk = tape.soft_threshold(c2, theta)?;
        let mut z_new = tape.mul_scalar(shrunk, self.p(vars, &format!("{pre}.mu2")))?;
        if stage > 1 {
            let keep = tape.mul_scalar(z, self.p(vars, &format!("{pre}.mu1")))?;
            z_new = tape.add(keep, z_new)?;
        }

        let gap = tape.sub(x, z_new)?;
        let step = tape.mul_scalar(gap, rho)?;
        let beta_new = tape.add(beta, step)?;
        Ok(StageVars {
            x,
            z: z_new,
            beta: beta_new,
        })
    }

    /// Nonnegative per-pixel threshold map for `δ`.
    pub fn dtg_forward(&self, tape: &mut Tape, vars: &[Var], delta: Var) -> Result<Var> {
        let f = tape.conv2d(
            delta,
            self.p(vars, "dtg.feat.weight"),
            Some(self.p(vars, "dtg.feat.bias")),
            1,
        )?;
        let f = tape.silu(f);
        let ua = tape.conv2d(
            f,
            self.p(vars, "dtg.branch_a.weight"),
            Some(self.p(vars, "dtg.branch_a.bias")),
            1,
        )?;
        let ub = tape.conv2d(
            f,
            self.p(vars, "dtg.branch_b.weight"),
            Some(self.p(vars, "dtg.branch_b.bias")),
            1,
        )?;
        let u = tape.concat(&[ua, ub])?;
        let avg = tape.channel_mean(u)?;
        let max = tape.channel_max(u)?;
        let pooled = tape.concat(&[avg, max])?;
        let att = tape.conv2d(
            pooled,
            self.p(vars, "dtg.att.weight"),
            Some(self.p(vars, "dtg.att.bias")),
            1,
        )?;
        Ok(tape.softplus(att))
    }

    /// Weighted sum of the tanh-enhanced `z` history maps.
    pub fn dir_fused(&self, tape: &mut Tape, vars: &[Var], history: &[Var]) -> Result<Var> {
        let m = self.cfg.history;
        if history.len() != m {
            return Err(Error::Shape(format!(
                "DIR expects {m} history maps, got {}",
                history.len()
            )));
        }
        let mut enhanced = Vec::with_capacity(m);
        for (i, &h) in history.iter().enumerate() {
            let c = tape.conv2d(
                h,
                self.p(vars, &format!("dir.hist{i}.weight")),
                Some(self.p(vars, &format!("dir.hist{i}.bias"))),
                1,
            )?;
            enhanced.push(tape.tanh(c));
        }
        let stacked = tape.concat(&enhanced)?;
        let w = tape.softmax(self.p(vars, "dir.fusion"))?;
        let w = tape.reshape(w, &[1, m, 1, 1])?;
        tape.conv2d(stacked, w, None, 0)
    }

    /// Fuses the `z` history with the input branch.
    pub fn dir_forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        history: &[Var],
        inp: Var,
    ) -> Result<Var> {
        let fused = self.dir_fused(tape, vars, history)?;
        let f = tape.conv2d(
            inp,
            self.p(vars, "dir.inp1.weight"),
            Some(self.p(vars, "dir.inp1.bias")),
            1,
        )?;
        let f = tape.silu(f);
        let f = tape.conv2d(
            f,
            self.p(vars, "dir.inp2.weight"),
            Some(self.p(vars, "dir.inp2.bias")),
            1,
        )?;
        let cat = tape.concat(&[fused, f])?;
        let g = tape.conv2d(
            cat,
            self.p(vars, "dir.fuse1.weight"),
            Some(self.p(vars, "dir.fuse1.bias")),
            1,
        )?;
        let g = tape.silu(g);
        tape.conv2d(
            g,
            self.p(vars, "dir.fuse2.weight"),
            Some(self.p(vars, "dir.fuse2.bias")),
            1,
        )
    }

    /// Last x-update: `(ΦᵀΦ + ρI)⁻¹ (f_DIR − ρ·S(β − z, θ_d))`, before
    /// clamping.
    pub fn final_reconstruction(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        inputs: &Inputs,
        last: &StageVars,
        history: &[Var],
    ) -> Result<Var> {
        let delta = tape.sub(last.beta, last.z)?;
        let shrunk = if self.cfg.use_dtg {
            let theta = self.dtg_forward(tape, vars, delta)?;
            tape.soft_threshold(delta, theta)?
        } else {
            delta
        };
        let first = if self.cfg.use_dir {
            self.dir_forward(tape, vars, history, inputs.inp)?
        } else {
            inputs.aty
        };
        let rho_raw = self.p(vars, "final.rho");
        let rho = tape.softplus(rho_raw);
        let pen = tape.mul_scalar(shrunk, rho)?;
        let r = tape.sub(first, pen)?;
        self.shifted_solve(tape, r, rho)
    }

    /// Whole network on a tape whose parameters were registered by
    /// [`Network::bind`].
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], y: &Measurement) -> Result<Forward> {
        let (n1, n2) = self.cfg.high_res_dims();
        let inputs = self.init_layer(tape, y)?;
        let mut z = tape.constant(Tensor::zeros(&[1, 1, n1, n2]));
        let mut beta = tape.constant(Tensor::zeros(&[1, 1, n1, n2]));
        let mut stages = Vec::with_capacity(self.cfg.stages);
        for k in 1..=self.cfg.stages {
            let s = self.stage_forward(tape, vars, k, &inputs, z, beta)?;
            z = s.z;
            beta = s.beta;
            stages.push(s);
        }
        let p = self.cfg.dir_pos;
        let history: Vec<Var> = stages[p - self.cfg.history..p]
            .iter()
            .map(|s| s.z)
            .collect();
        let last = *stages.last().expect("at least one stage");
        let x_final = self.final_reconstruction(tape, vars, &inputs, &last, &history)?;
        let clamped = tape.relu(x_final);
        let output = tape.scale(clamped, self.cfg.intensity_scale);
        Ok(Forward {
            output,
            x_final,
            stages,
        })
    }

    /// All intermediate states for one measurement.
    pub fn trace(&self, y: &Measurement) -> Result<Trace> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let f = self.forward(&mut tape, &vars, y)?;
        let val = |v: Var| tape.value(v).data().to_vec();
        Ok(Trace {
            stages: f
                .stages
                .iter()
                .map(|s| StageState {
                    x: val(s.x),
                    z: val(s.z),
                    beta: val(s.beta),
                })
                .collect(),
            x_final: val(f.x_final),
            output: val(f.output),
        })
    }
}
