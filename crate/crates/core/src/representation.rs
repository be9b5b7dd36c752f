//! Observation encoder pretrained as a small VQ-VAE.
//!
//! The encoder is `obs -> [linear, layer norm, relu] x2 -> z_e`. During
//! pretraining `z_e` is snapped to its nearest codebook entry with a
//! straight-through gradient and decoded back to the observation features.
//! Downstream modules consume the continuous `z_e`.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{stack_rows, Activation, AdamW, AdamWConfig, Archive, Graph, Mlp, ParamSet, Tensor, Var};
use crate::sim::Observation;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RepresentationConfig {
    pub d_z: usize,
    pub codebook_size: usize,
    pub hidden: usize,
    pub commitment: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for RepresentationConfig {
    fn default() -> Self {
        Self {
            d_z: 32,
            codebook_size: 128,
            hidden: 128,
            commitment: 0.25,
            steps: 5000,
            batch_size: 128,
            lr: 3e-4,
            weight_decay: 1e-4,
        }
    }
}

impl RepresentationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.codebook_size < 2 || self.d_z == 0 || self.hidden == 0 {
            return Err(Error::Config("representation needs d_z, hidden > 0 and codebook_size >= 2".into()));
        }
        Ok(())
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// Stack observation features into a matrix, rejecting wrong widths.
pub fn feature_matrix<'a>(
    obs: impl IntoIterator<Item = &'a Observation>,
    obs_dim: usize,
    max_range: f64,
) -> Result<Tensor> {
    let rows: Vec<Vec<f64>> = obs.into_iter().map(|o| o.features(max_range)).collect();
    if let Some(bad) = rows.iter().find(|r| r.len() != obs_dim) {
        return Err(Error::DimMismatch {
            what: "observation features".into(),
            expected: obs_dim,
            found: bad.len(),
        });
    }
    Ok(stack_rows(rows.iter().map(|r| r.as_slice()), obs_dim))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub params: ParamSet,
    net: Mlp,
    pub obs_dim: usize,
    pub d_z: usize,
    pub max_range: f64,
}

impl Encoder {
    pub fn new(obs_dim: usize, max_range: f64, cfg: &RepresentationConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new(seed);
        let net = Mlp::new(
            &mut params,
            &mut rng,
            "encoder",
            &[obs_dim, cfg.hidden, cfg.hidden, cfg.d_z],
            Activation::Relu,
            true,
        );
        Self {
            params,
            net,
            obs_dim,
            d_z: cfg.d_z,
            max_range,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &[Var], x: Var) -> Var {
        self.net.forward(g, p, x)
    }

    pub fn encode_features(&self, x: &Tensor) -> Result<Tensor> {
        if x.ncols() != self.obs_dim {
            return Err(Error::DimMismatch {
                what: "encoder input".into(),
                expected: self.obs_dim,
                found: x.ncols(),
            });
        }
        Ok(self.net.infer(&self.params, x))
    }

    pub fn encode(&self, obs: &Observation) -> Result<Vec<f64>> {
        let x = feature_matrix([obs], self.obs_dim, self.max_range)?;
        Ok(self.encode_features(&x)?.row(0).to_vec())
    }

    pub fn encode_all<'a>(&self, obs: impl IntoIterator<Item = &'a Observation>) -> Result<Tensor> {
        let x = feature_matrix(obs, self.obs_dim, self.max_range)?;
        self.encode_features(&x)
    }
}

/// Nearest codebook row by Euclidean distance; ties go to the lowest index.
pub fn quantize(z_e: &[f64], codebook: &Tensor) -> (Vec<f64>, usize) {
    assert!(codebook.nrows() > 0, "empty codebook");
    let mut best = (f64::INFINITY, 0);
    for (i, row) in codebook.rows().into_iter().enumerate() {
        let d: f64 = row.iter().zip(z_e).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.0 {
            best = (d, i);
        }
    }
    (codebook.row(best.1).to_vec(), best.1)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct VqLoss {
    pub total: f64,
    pub recon: f64,
    pub codebook: f64,
    pub commitment: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VqVae {
    pub encoder: Encoder,
    pub codebook: ParamSet,
    pub decoder: ParamSet,
    dec: Mlp,
    pub commitment: f64,
}

struct Taped {
    total: Var,
    recon: Var,
    codebook: Var,
    commitment: Var,
}

impl VqVae {
    pub fn new(obs_dim: usize, max_range: f64, cfg: &RepresentationConfig, seed: u64) -> Self {
        let encoder = Encoder::new(obs_dim, max_range, cfg, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xDEC0);
        let mut decoder = ParamSet::new(seed);
        let dec = Mlp::new(
            &mut decoder,
            &mut rng,
            "decoder",
            &[cfg.d_z, cfg.hidden, cfg.hidden, obs_dim],
            Activation::Relu,
            false,
        );
        let mut codebook = ParamSet::new(seed);
        codebook.add_uniform(&mut rng, "codebook", cfg.codebook_size, cfg.d_z, 1);
        Self {
            encoder,
            codebook,
            decoder,
            dec,
            commitment: cfg.commitment,
        }
    }

    pub fn entries(&self) -> &Tensor {
        self.codebook.get(0)
    }

    fn nearest(&self, z_e: &Tensor) -> Vec<usize> {
        z_e.rows()
            .into_iter()
            .map(|r| quantize(r.as_slice().expect("contiguous row"), self.entries()).1)
            .collect()
    }

    fn tape(&self, g: &mut Graph, pe: &[Var], pc: &[Var], pd: &[Var], x: &Tensor) -> Taped {
        let xv = g.constant(x.clone());
        let z_e = self.encoder.forward(g, pe, xv);
        let idx = self.nearest(g.value(z_e));
        let e = g.gather(pc[0], &idx);
        // straight-through: forward uses e, backward flows to z_e
        let shift = g.sub(e, z_e);
        let shift = g.detach(shift);
        let z_q = g.add(z_e, shift);
        let x_hat = self.dec.forward(g, pd, z_q);
        let err = g.sub(x_hat, xv);
        let err = g.square(err);
        let recon = g.mean(err);
        let z_sg = g.detach(z_e);
        let cb = g.sub(z_sg, e);
        let cb = g.square(cb);
        let codebook = g.mean(cb);
        let e_sg = g.detach(e);
        let cm = g.sub(z_e, e_sg);
        let cm = g.square(cm);
        let commitment = g.mean(cm);
        let weighted = g.scale(commitment, self.commitment);
        let total = g.add(recon, codebook);
        let total = g.add(total, weighted);
        Taped {
            total,
            recon,
            codebook,
            commitment,
        }
    }

    pub fn loss(&self, x: &Tensor) -> VqLoss {
        let mut g = Graph::new();
        let pe = self.encoder.params.bind_frozen(&mut g);
        let pc = self.codebook.bind_frozen(&mut g);
        let pd = self.decoder.bind_frozen(&mut g);
        let t = self.tape(&mut g, &pe, &pc, &pd, x);
        VqLoss {
            total: g.scalar(t.total),
            recon: g.scalar(t.recon),
            codebook: g.scalar(t.codebook),
            commitment: g.scalar(t.commitment),
        }
    }

    /// Per-row squared reconstruction error through the quantized path.
    pub fn reconstruction_errors(&self, x: &Tensor) -> Result<Vec<f64>> {
        let z_e = self.encoder.encode_features(x)?;
        let idx = self.nearest(&z_e);
        let rows: Vec<Vec<f64>> = idx.iter().map(|&i| self.entries().row(i).to_vec()).collect();
        let z_q = stack_rows(rows.iter().map(|r| r.as_slice()), self.encoder.d_z);
        let x_hat = self.dec.infer(&self.decoder, &z_q);
        Ok((&x_hat - x)
            .rows()
            .into_iter()
            .map(|r| r.iter().map(|v| v * v).sum::<f64>() / r.len() as f64)
            .collect())
    }

    pub fn save_into(&self, a: &mut Archive) {
        a.insert_params("encoder", &self.encoder.params);
        a.insert_params("codebook", &self.codebook);
        a.insert_params("decoder", &self.decoder);
    }

    pub fn load_from(&mut self, a: &Archive) -> Result<()> {
        a.load_into("encoder", &mut self.encoder.params)?;
        a.load_into("codebook", &mut self.codebook)?;
        a.load_into("decoder", &mut self.decoder)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PretrainLog {
    pub step: usize,
    pub loss: VqLoss,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub model: VqVae,
    pub log: Vec<PretrainLog>,
    pub final_recon: f64,
}

/// Pretrain on a feature matrix. The codebook is seeded from encoded data rows
/// so that no entry starts dead.
pub fn pretrain_encoder(data: &Tensor, max_range: f64, cfg: &RepresentationConfig, seed: u64) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if data.nrows() == 0 {
        return Err(Error::Empty("no observations to pretrain on".into()));
    }
    let mut model = VqVae::new(data.ncols(), max_range, cfg, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    init_codebook(&mut model, data, &mut rng)?;

    let mut opt_e = AdamW::new(&model.encoder.params, cfg.adamw());
    let mut opt_c = AdamW::new(&model.codebook, cfg.adamw());
    let mut opt_d = AdamW::new(&model.decoder, cfg.adamw());
    let mut log = Vec::new();
    for step in 0..cfg.steps {
        let batch = sample_rows(data, cfg.batch_size, &mut rng);
        let mut g = Graph::new();
        let pe = model.encoder.params.bind(&mut g);
        let pc = model.codebook.bind(&mut g);
        let pd = model.decoder.bind(&mut g);
        let t = model.tape(&mut g, &pe, &pc, &pd, &batch);
        let last = VqLoss {
            total: g.scalar(t.total),
            recon: g.scalar(t.recon),
            codebook: g.scalar(t.codebook),
            commitment: g.scalar(t.commitment),
        };
        if !last.total.is_finite() {
            return Err(Error::Divergence {
                stage: "vq-vae pretraining".into(),
                report: format!("step {step}: {last:?}"),
            });
        }
        let grads = g.backward(t.total);
        let g_e = model.encoder.params.grads(&grads, &pe);
        opt_e.step(&mut model.encoder.params, &g_e)?;
        let g_c = model.codebook.grads(&grads, &pc);
        opt_c.step(&mut model.codebook, &g_c)?;
        let g_d = model.decoder.grads(&grads, &pd);
        opt_d.step(&mut model.decoder, &g_d)?;
        if step % 50 == 0 || step + 1 == cfg.steps {
            log.push(PretrainLog { step, loss: last });
        }
    }
    let errs = model.reconstruction_errors(data)?;
    let final_recon = errs.iter().sum::<f64>() / errs.len() as f64;
    Ok(PretrainOutcome { model, log, final_recon })
}

fn init_codebook<R: Rng>(model: &mut VqVae, data: &Tensor, rng: &mut R) -> Result<()> {
    let z = model.encoder.encode_features(data)?;
    let e = model.codebook.get(0).nrows();
    let cb = model.codebook.get_mut(0);
    for i in 0..e {
        let r = rng.random_range(0..z.nrows());
        let jitter: Vec<f64> = (0..z.ncols()).map(|_| rng.random_range(-1e-3..1e-3)).collect();
        for (j, v) in z.row(r).iter().enumerate() {
            cb[[i, j]] = v + jitter[j];
        }
    }
    Ok(())
}

/// Uniform minibatch of rows (without replacement when possible).
pub fn sample_rows<R: Rng>(data: &Tensor, n: usize, rng: &mut R) -> Tensor {
    let idx: Vec<usize> = if n <= data.nrows() {
        sample(rng, data.nrows(), n).into_vec()
    } else {
        (0..n).map(|_| rng.random_range(0..data.nrows())).collect()
    };
    data.select(ndarray::Axis(0), &idx)
}
