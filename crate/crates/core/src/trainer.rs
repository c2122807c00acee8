//! Joint optimization of appearance, compact semantics, uncertainty, the
//! decoder and the smoothing field.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::density::{density_control, DensityConfig, DensityOutcome, GradStats};
use crate::error::{Error, Result};
use crate::heads::{Decoder, SmoothingMlp};
use crate::image::Image;
use crate::losses::{rgb_loss, semantic_ce_loss, smoothing_loss, uncertainty_reg};
use crate::optim::{AdamConfig, AdamState};
use crate::quantizer::IndexMap;
use crate::raster::{rasterize_backward, rasterize_with_state, ChannelMask, RasterSettings, RenderOutput};
use crate::real::sigmoid;
use crate::scene::{Camera, GaussianCloud};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    /// Learning rate of semantics, uncertainty, decoder and smoothing MLP.
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lambda_ce: f64,
    pub lambda_u: f64,
    pub lambda_s: f64,
    pub lambda_smo: f64,
    pub w_s: f64,
    /// Expected codebook size; must match the quantizer output.
    pub codebook_size: usize,
    pub smoothing_frequencies: usize,
    /// Position learning rate, multiplied by the scene extent and decayed
    /// exponentially to `position_lr_final` over the run.
    pub position_lr: f64,
    pub position_lr_final: f64,
    pub rotation_lr: f64,
    pub scale_lr: f64,
    pub opacity_lr: f64,
    pub color_lr: f64,
    /// When false the RGB loss is dropped. Geometry parameters still go
    /// through the optimizer with whatever gradient reaches them.
    pub train_geometry: bool,
    pub background: [f64; 3],
    pub density: DensityConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 3000,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lambda_ce: 1.0,
            lambda_u: 1.0,
            lambda_s: 1.0,
            lambda_smo: 1.0,
            w_s: 0.1,
            codebook_size: 32,
            smoothing_frequencies: 0,
            position_lr: 1.6e-4,
            position_lr_final: 1.6e-6,
            rotation_lr: 1e-3,
            scale_lr: 5e-3,
            opacity_lr: 0.05,
            color_lr: 2.5e-3,
            train_geometry: true,
            background: [0.0; 3],
            density: DensityConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [
            ("lambda_ce", self.lambda_ce),
            ("lambda_u", self.lambda_u),
            ("lambda_s", self.lambda_s),
            ("lambda_smo", self.lambda_smo),
        ];
        for (name, v) in weights {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite non-negative number, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.w_s) {
            return Err(Error::Config(format!("w_s must lie in [0, 1], got {}", self.w_s)));
        }
        if self.codebook_size == 0 {
            return Err(Error::Config("codebook_size must be positive".into()));
        }
        if self.density.interval == 0 {
            return Err(Error::Config("density.interval must be positive".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    fn densify_until(&self) -> usize {
        self.density.until.unwrap_or(self.iterations / 2)
    }
}

/// One supervised training view.
#[derive(Clone, Debug)]
pub struct TrainingView {
    pub camera: Camera,
    pub rgb: Image<f32>,
    pub indices: IndexMap,
}

/// Everything optimized in the second phase.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneModel {
    pub cloud: GaussianCloud<f32>,
    pub decoder: Decoder<f32>,
    pub smoother: SmoothingMlp<f32>,
}

impl SceneModel {
    /// Fresh heads around an initial cloud.
    pub fn init(cloud: GaussianCloud<f32>, classes: usize, frequencies: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_4EAD);
        let d = cloud.sem_dim;
        Self {
            decoder: Decoder::new(d, classes, &mut rng),
            smoother: SmoothingMlp::new(frequencies, d, &mut rng),
            cloud,
        }
    }
}

/// Loss values of one iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub view: usize,
    pub total: f64,
    pub rgb: f64,
    pub ce: f64,
    pub uncertainty: f64,
    pub smoothing: f64,
    pub psnr: f64,
    pub gaussians: usize,
}

pub fn write_loss_csv(records: &[LossRecord], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r).map_err(|e| Error::Format { format: "csv", reason: e.to_string() })?;
    }
    w.flush().map_err(|e| Error::Format { format: "csv", reason: e.to_string() })?;
    Ok(())
}

pub fn save_loss_csv(records: &[LossRecord], path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_loss_csv(records, std::io::BufWriter::new(f))
}

/// Radius of the camera rig around its centroid, padded by 10%.
pub fn camera_extent(cameras: &[Camera]) -> f64 {
    if cameras.is_empty() {
        return 1.0;
    }
    let centers: Vec<[f64; 3]> = cameras.iter().map(Camera::center).collect();
    let n = centers.len() as f64;
    let c: [f64; 3] = std::array::from_fn(|k| centers.iter().map(|p| p[k]).sum::<f64>() / n);
    let r = centers
        .iter()
        .map(|p| (0..3).map(|k| (p[k] - c[k]).powi(2)).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    if r > 0.0 {
        1.1 * r
    } else {
        1.0
    }
}

struct Optimizers {
    position: AdamState<f32>,
    rotation: AdamState<f32>,
    scale: AdamState<f32>,
    opacity: AdamState<f32>,
    color: AdamState<f32>,
    semantic: AdamState<f32>,
    uncertainty: AdamState<f32>,
    decoder: AdamState<f32>,
    smoother: AdamState<f32>,
}

impl Optimizers {
    fn new(model: &SceneModel) -> Self {
        let n = model.cloud.len();
        Self {
            position: AdamState::new(3 * n),
            rotation: AdamState::new(4 * n),
            scale: AdamState::new(3 * n),
            opacity: AdamState::new(n),
            color: AdamState::new(3 * n),
            semantic: AdamState::new(model.cloud.sem_dim * n),
            uncertainty: AdamState::new(n),
            decoder: AdamState::new(model.decoder.mlp.param_count()),
            smoother: AdamState::new(model.smoother.mlp.param_count()),
        }
    }

    fn per_gaussian(&mut self, sem_dim: usize) -> [(&mut AdamState<f32>, usize); 7] {
        [
            (&mut self.position, 3),
            (&mut self.rotation, 4),
            (&mut self.scale, 3),
            (&mut self.opacity, 1),
            (&mut self.color, 3),
            (&mut self.semantic, sem_dim),
            (&mut self.uncertainty, 1),
        ]
    }

    fn apply(&mut self, outcome: &DensityOutcome, sem_dim: usize) {
        for (state, width) in self.per_gaussian(sem_dim) {
            state.retain_rows(&outcome.keep, width);
            state.push_zero_rows(outcome.added, width);
        }
    }
}

/// Stateful trainer; [`Trainer::step`] runs one iteration.
pub struct Trainer<'a> {
    cfg: TrainConfig,
    views: &'a [TrainingView],
    model: SceneModel,
    optim: Optimizers,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    stats: GradStats,
    extent: f64,
    settings: RasterSettings,
    iteration: usize,
    history: Vec<LossRecord>,
}

impl<'a> Trainer<'a> {
    pub fn new(model: SceneModel, views: &'a [TrainingView], cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let classes = model.decoder.classes();
        if classes != cfg.codebook_size {
            return Err(Error::CodebookMismatch {
                context: "decoder output width vs configured codebook_size".into(),
                expected: cfg.codebook_size,
                found: classes,
            });
        }
        if views.is_empty() {
            return Err(Error::InvalidSpec("training needs at least one view".into()));
        }
        for (i, v) in views.iter().enumerate() {
            v.camera.validate()?;
            let (w, h) = (v.camera.width, v.camera.height);
            if v.rgb.width != w || v.rgb.height != h || v.rgb.channels != 3 {
                return Err(Error::DimensionMismatch { what: "training image size", expected: w * h * 3, found: v.rgb.data.len() });
            }
            if v.indices.width != w || v.indices.height != h {
                return Err(Error::DimensionMismatch { what: "index map size", expected: w * h, found: v.indices.indices.len() });
            }
            if let Some(&m) = v.indices.indices.iter().max() {
                if m as usize >= classes {
                    return Err(Error::CodebookMismatch {
                        context: format!("index map of view {i}"),
                        expected: classes,
                        found: m as usize + 1,
                    });
                }
            }
        }
        if let Some(i) = model.cloud.first_non_finite() {
            return Err(Error::NonFinite { what: "initial Gaussian", index: i });
        }
        let cameras: Vec<Camera> = views.iter().map(|v| v.camera.clone()).collect();
        Ok(Self {
            optim: Optimizers::new(&model),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            order: Vec::new(),
            stats: GradStats::new(model.cloud.len()),
            extent: camera_extent(&cameras),
            settings: RasterSettings::with_background(cfg.background),
            iteration: 0,
            history: Vec::new(),
            views,
            model,
            cfg,
        })
    }

    pub fn model(&self) -> &SceneModel {
        &self.model
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn history(&self) -> &[LossRecord] {
        &self.history
    }

    pub fn extent(&self) -> f64 {
        self.extent
    }

    pub fn finish(self) -> (SceneModel, Vec<LossRecord>) {
        (self.model, self.history)
    }

    fn next_view(&mut self) -> usize {
        if self.order.is_empty() {
            self.order = (0..self.views.len()).collect();
            self.order.shuffle(&mut self.rng);
        }
        self.order.pop().expect("refilled above")
    }

    fn position_lr(&self) -> f64 {
        let t = if self.cfg.iterations > 1 {
            (self.iteration as f64 / (self.cfg.iterations - 1) as f64).min(1.0)
        } else {
            0.0
        };
        let (a, b) = (self.cfg.position_lr, self.cfg.position_lr_final);
        let lr = if a > 0.0 && b > 0.0 { a * (b / a).powf(t) } else { a };
        lr * self.extent
    }

    /// Runs all remaining iterations, calling `on_step` after each.
    pub fn run(&mut self, mut on_step: impl FnMut(&LossRecord)) -> Result<()> {
        while self.iteration < self.cfg.iterations {
            let rec = self.step()?;
            on_step(&rec);
        }
        Ok(())
    }

    pub fn step(&mut self) -> Result<LossRecord> {
        let it = self.iteration + 1;
        let vi = self.next_view();
        let view = &self.views[vi];
        let cfg = &self.cfg;
        let model = &mut self.model;
        let (w, h) = (view.camera.width, view.camera.height);
        let d = model.cloud.sem_dim;

        let (render, state) = rasterize_with_state(&model.cloud, &view.camera, &self.settings)?;
        let mut upstream = RenderOutput::zeros(w, h, d);
        let check = |term: &'static str, v: f32| -> Result<f64> {
            if v.is_finite() {
                Ok(f64::from(v))
            } else {
                Err(Error::NonFiniteLoss { iteration: it, term, value: f64::from(v) })
            }
        };

        let mse = render.color.data.iter().zip(&view.rgb.data).map(|(a, b)| f64::from(a - b).powi(2)).sum::<f64>()
            / render.color.data.len().max(1) as f64;
        let psnr = if mse > 0.0 { (10.0 * (1.0 / mse).log10()).min(100.0) } else { 100.0 };

        let mut l_rgb = 0.0;
        if cfg.train_geometry {
            let (l, g) = rgb_loss(&render.color, &view.rgb)?;
            l_rgb = check("rgb", l)?;
            upstream.color = g;
        }

        let (logits, dec_cache) = model.decoder.forward_cached(&render.semantic)?;
        let (ce, mut d_logits, d_u_ce) = semantic_ce_loss(&logits, &view.indices, &render.uncertainty)?;
        let (ureg, d_u_reg) = uncertainty_reg(&render.uncertainty);
        let l_ce = check("semantic_ce", ce)?;
        let l_u = check("uncertainty", ureg)?;
        let (ls, lce, lu) = (cfg.lambda_s as f32, cfg.lambda_ce as f32, cfg.lambda_u as f32);
        for v in &mut d_logits.data {
            *v *= ls * lce;
        }
        for ((g, &a), &b) in upstream.uncertainty.data.iter_mut().zip(&d_u_ce.data).zip(&d_u_reg.data) {
            *g = ls * (lce * a + lu * b);
        }
        let (dec_grads, d_sem) = model.decoder.backward(&dec_cache, &d_logits)?;
        upstream.semantic = d_sem;

        let mut grads = rasterize_backward(&state, &model.cloud, &upstream, ChannelMask::ISOLATED)?;

        let (s_mlp, smo_cache) = model.smoother.forward(&model.cloud.positions)?;
        let u: Vec<f32> = model.cloud.uncertainty_raw.iter().map(|&r| sigmoid(r)).collect();
        let (smo, mut d_mlp, d_g) = smoothing_loss(&s_mlp, &model.cloud.semantics, &u, cfg.w_s, d)?;
        let l_smo = check("smoothing", smo)?;
        let lsmo = cfg.lambda_smo as f32;
        for v in &mut d_mlp {
            *v *= lsmo;
        }
        for (g, &v) in grads.semantics.iter_mut().zip(&d_g) {
            *g += lsmo * v;
        }
        let (smo_grads, _) = model.smoother.backward(&smo_cache, &d_mlp)?;

        let total = cfg.lambda_s * (cfg.lambda_ce * l_ce + cfg.lambda_u * l_u) + cfg.lambda_smo * l_smo + l_rgb;
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss { iteration: it, term: "total", value: total });
        }

        let pos_lr = self.position_lr();
        let cfg = &self.cfg;
        let model = &mut self.model;
        let o = &mut self.optim;
        let cloud = &mut model.cloud;
        o.position.step(&cfg.adam(pos_lr), cloud.positions.as_flattened_mut(), grads.positions.as_flattened(), "position")?;
        o.rotation.step(&cfg.adam(cfg.rotation_lr), cloud.rotations.as_flattened_mut(), grads.rotations.as_flattened(), "rotation")?;
        o.scale.step(&cfg.adam(cfg.scale_lr), cloud.log_scales.as_flattened_mut(), grads.log_scales.as_flattened(), "log_scale")?;
        o.opacity.step(&cfg.adam(cfg.opacity_lr), &mut cloud.opacity_raw, &grads.opacity_raw, "opacity")?;
        o.color.step(&cfg.adam(cfg.color_lr), cloud.colors.as_flattened_mut(), grads.colors.as_flattened(), "color")?;
        let sem_adam = cfg.adam(cfg.lr);
        o.semantic.step(&sem_adam, &mut cloud.semantics, &grads.semantics, "semantic")?;
        o.uncertainty.step(&sem_adam, &mut cloud.uncertainty_raw, &grads.uncertainty_raw, "uncertainty")?;
        let mut p = model.decoder.mlp.flatten();
        o.decoder.step(&sem_adam, &mut p, &dec_grads.flatten(), "decoder")?;
        model.decoder.mlp.set_flat(&p);
        let mut p = model.smoother.mlp.flatten();
        o.smoother.step(&sem_adam, &mut p, &smo_grads.flatten(), "smoothing mlp")?;
        model.smoother.mlp.set_flat(&p);

        let dc = &cfg.density;
        let densifying = dc.enabled && cfg.train_geometry && it <= cfg.densify_until();
        if densifying {
            self.stats.record(&grads, w, h);
            if it >= dc.start && it % dc.interval == 0 {
                let outcome = density_control(cloud, &self.stats, dc, self.extent, &mut self.rng);
                o.apply(&outcome, cloud.sem_dim);
                self.stats = GradStats::new(cloud.len());
            }
        }

        self.iteration = it;
        let rec = LossRecord {
            iteration: it,
            view: vi,
            total,
            rgb: l_rgb,
            ce: l_ce,
            uncertainty: l_u,
            smoothing: l_smo,
            psnr,
            gaussians: self.model.cloud.len(),
        };
        self.history.push(rec.clone());
        Ok(rec)
    }
}

/// Runs a full training schedule.
pub fn train(model: SceneModel, views: &[TrainingView], cfg: &TrainConfig) -> Result<(SceneModel, Vec<LossRecord>)> {
    let mut t = Trainer::new(model, views, cfg.clone())?;
    t.run(|_| {})?;
    Ok(t.finish())
}
