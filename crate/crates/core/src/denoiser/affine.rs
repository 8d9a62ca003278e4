use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::oracle::GaussianDataModel;
use super::{EpsilonPredictor, NoiseLevel};
use crate::error::{Error, FormatError, Result};
use crate::image::ImageBuffer;
use crate::schedule::NoiseSchedule;

/// How the condition enters the affine model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CondMode {
    #[default]
    None,
    /// `g_t * c` is added to the prediction.
    Concat,
}

/// Per-timestep affine noise predictor
/// `eps_hat = a_t * x_t + b_t (+ g_t * c)`, with a scalar gain `a_t`, a
/// per-pixel offset image `b_t` and a scalar condition gain `g_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinePredictor {
    width: usize,
    height: usize,
    cond_mode: CondMode,
    a: Vec<f64>,
    g: Vec<f64>,
    // T rows of width * height offsets
    b: Vec<f64>,
}

impl AffinePredictor {
    /// Initialization used by training: `a_t = 1`, `b_t = 0`, `g_t = 0`.
    pub fn identity_init(steps: usize, width: usize, height: usize) -> Self {
        Self::with_cond_mode(steps, width, height, CondMode::None)
    }

    pub fn with_cond_mode(steps: usize, width: usize, height: usize, cond_mode: CondMode) -> Self {
        Self {
            width,
            height,
            cond_mode,
            a: vec![1.0; steps],
            g: vec![0.0; steps],
            b: vec![0.0; steps * width * height],
        }
    }

    pub fn steps(&self) -> usize {
        self.a.len()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn cond_mode(&self) -> CondMode {
        self.cond_mode
    }

    /// Gain `a_t` for `t` in `1..=T`.
    pub fn gain(&self, t: usize) -> f64 {
        self.a[t - 1]
    }

    pub fn cond_gain(&self, t: usize) -> f64 {
        self.g[t - 1]
    }

    pub fn offsets(&self, t: usize) -> &[f64] {
        let d = self.width * self.height;
        &self.b[(t - 1) * d..t * d]
    }

    pub fn set_coefficients(&mut self, t: usize, a: f64, g: f64, b: &[f64]) {
        let d = self.width * self.height;
        assert_eq!(b.len(), d, "offset image has wrong size");
        self.a[t - 1] = a;
        self.g[t - 1] = g;
        self.b[(t - 1) * d..t * d].copy_from_slice(b);
    }

    /// Flat text form: a header line, then one line per timestep
    /// `t a_t g_t checksum b_t[0] .. b_t[d-1]`, where `checksum` is the
    /// FNV-1a hash of the offsets' bit patterns.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "# affine-epsilon steps={} width={} height={} cond={}\n",
            self.steps(),
            self.width,
            self.height,
            match self.cond_mode {
                CondMode::None => "none",
                CondMode::Concat => "concat",
            }
        );
        for t in 1..=self.steps() {
            let b = self.offsets(t);
            write!(
                out,
                "{} {:e} {:e} {:016x}",
                t,
                self.gain(t),
                self.cond_gain(t),
                fnv1a(b)
            )
            .unwrap();
            for v in b {
                write!(out, " {v:e}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, FormatError> {
        let malformed = |line: usize, message: &str| FormatError::Malformed {
            line,
            message: message.to_string(),
        };
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| malformed(1, "empty file"))?;
        let header = header
            .strip_prefix("# affine-epsilon ")
            .ok_or_else(|| malformed(1, "missing affine-epsilon header"))?;
        let mut steps = None;
        let mut width = None;
        let mut height = None;
        let mut cond = None;
        for field in header.split_whitespace() {
            let (k, v) = field
                .split_once('=')
                .ok_or_else(|| malformed(1, "bad header field"))?;
            match k {
                "steps" => steps = v.parse::<usize>().ok(),
                "width" => width = v.parse::<usize>().ok(),
                "height" => height = v.parse::<usize>().ok(),
                "cond" => {
                    cond = match v {
                        "none" => Some(CondMode::None),
                        "concat" => Some(CondMode::Concat),
                        _ => None,
                    }
                }
                _ => return Err(malformed(1, "unknown header field")),
            }
        }
        let (steps, width, height, cond) = match (steps, width, height, cond) {
            (Some(s), Some(w), Some(h), Some(c)) if s > 0 && w > 0 && h > 0 => (s, w, h, c),
            _ => return Err(malformed(1, "incomplete header")),
        };
        let d = width * height;
        let mut model = Self::with_cond_mode(steps, width, height, cond);
        let mut seen = 0;
        for (i, line) in lines {
            let lineno = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 4 + d {
                return Err(malformed(lineno, "wrong number of fields"));
            }
            let t: usize = fields[0]
                .parse()
                .map_err(|_| malformed(lineno, "bad timestep"))?;
            if t != seen + 1 || t > steps {
                return Err(malformed(lineno, "timesteps must run 1..=steps in order"));
            }
            let num = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| malformed(lineno, "bad number"))
            };
            let a = num(fields[1])?;
            let g = num(fields[2])?;
            let checksum = u64::from_str_radix(fields[3], 16)
                .map_err(|_| malformed(lineno, "bad checksum"))?;
            let b = fields[4..]
                .iter()
                .map(|s| num(s))
                .collect::<Result<Vec<_>, _>>()?;
            if fnv1a(&b) != checksum {
                return Err(malformed(lineno, "offset checksum mismatch"));
            }
            model.set_coefficients(t, a, g, &b);
            seen = t;
        }
        if seen != steps {
            return Err(malformed(seen + 2, "missing timestep rows"));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::from_text(&text)?)
    }

    fn check_shape(&self, img: &ImageBuffer) -> Result<()> {
        if img.shape() != (self.width, self.height) {
            return Err(Error::ShapeMismatch {
                expected: (self.width, self.height),
                actual: img.shape(),
            });
        }
        Ok(())
    }
}

fn fnv1a(values: &[f64]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for v in values {
        for byte in v.to_bits().to_le_bytes() {
            hash ^= byte as u64;
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    hash
}

impl EpsilonPredictor for AffinePredictor {
    fn predict(
        &self,
        x_t: &ImageBuffer,
        level: NoiseLevel,
        cond: Option<&ImageBuffer>,
    ) -> Result<ImageBuffer> {
        self.check_shape(x_t)?;
        let cond = match self.cond_mode {
            CondMode::None => None,
            CondMode::Concat => {
                let c = cond.ok_or(Error::MissingCondition)?;
                self.check_shape(c)?;
                Some(c)
            }
        };
        // linear interpolation of coefficients between integer timesteps
        let t = level.t.clamp(1.0, self.steps() as f64);
        let lo = t.floor() as usize;
        let hi = (lo + 1).min(self.steps());
        let w = t - lo as f64;
        let a = (1.0 - w) * self.gain(lo) + w * self.gain(hi);
        let g = (1.0 - w) * self.cond_gain(lo) + w * self.cond_gain(hi);
        let (b_lo, b_hi) = (self.offsets(lo), self.offsets(hi));
        let data = x_t
            .as_slice()
            .iter()
            .enumerate()
            .map(|(p, &x)| {
                let b = (1.0 - w) * b_lo[p] + w * b_hi[p];
                let c = cond.map_or(0.0, |c| c.as_slice()[p]);
                a * x + b + g * c
            })
            .collect();
        ImageBuffer::new(self.width, self.height, data)
    }

    fn requires_condition(&self) -> bool {
        self.cond_mode == CondMode::Concat
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub lr: f64,
    pub iterations: usize,
    /// Items drawn per iteration, all at the iteration's timestep.
    pub batch: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            iterations: 200_000,
            batch: 4,
        }
    }
}

/// Where training pairs `(x_0, c)` come from.
#[derive(Debug, Clone)]
pub enum TrainingData {
    Gaussian(GaussianDataModel),
    /// Gaussian data observed through `c = x_0 + N(0, noise_level^2)`.
    ConditionedGaussian {
        model: GaussianDataModel,
        noise_level: f64,
    },
    /// Fixed pairs, drawn uniformly with replacement.
    Samples(Vec<(ImageBuffer, Option<ImageBuffer>)>),
}

impl TrainingData {
    fn shape(&self) -> Result<(usize, usize)> {
        match self {
            TrainingData::Gaussian(m) | TrainingData::ConditionedGaussian { model: m, .. } => {
                Ok(m.mean().shape())
            }
            TrainingData::Samples(s) => s
                .first()
                .map(|(x, _)| x.shape())
                .ok_or_else(|| Error::domain("training sample set is empty")),
        }
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> (ImageBuffer, Option<ImageBuffer>) {
        match self {
            TrainingData::Gaussian(m) => (m.sample(rng), None),
            TrainingData::ConditionedGaussian { model, noise_level } => {
                let x0 = model.sample(rng);
                let eta = ImageBuffer::gaussian(x0.width(), x0.height(), rng);
                let c = x0.lincomb(1.0, &eta, *noise_level).expect("same shape");
                (x0, Some(c))
            }
            TrainingData::Samples(s) => s[rng.random_range(0..s.len())].clone(),
        }
    }
}

/// Trained model plus the mean training loss of each epoch (twenty epochs
/// per run).
#[derive(Debug, Clone)]
pub struct AffineTraining {
    pub predictor: AffinePredictor,
    pub initial_loss: f64,
    pub epoch_losses: Vec<f64>,
}

const EPOCHS: usize = 20;
const PROBE_DRAWS: usize = 64;

/// Stochastic gradient descent on the noise-prediction objective restricted
/// to the affine family. Gradients are analytic; per-pixel offsets use
/// per-pixel step sizes. The returned coefficients are tail averages over
/// the second half of the run.
#[allow(clippy::needless_range_loop)]
pub fn train_affine_predictor<R: Rng + ?Sized>(
    data: &TrainingData,
    cond_mode: CondMode,
    sched: &NoiseSchedule,
    sgd: SgdConfig,
    rng: &mut R,
) -> Result<AffineTraining> {
    if sgd.iterations == 0 || sgd.batch == 0 {
        return Err(Error::domain(
            "SGD needs at least one iteration and a non-empty batch",
        ));
    }
    if !(sgd.lr >= 0.0 && sgd.lr.is_finite()) {
        return Err(Error::domain(format!(
            "learning rate must be >= 0, got {}",
            sgd.lr
        )));
    }
    if cond_mode == CondMode::Concat && matches!(data, TrainingData::Gaussian(_)) {
        return Err(Error::domain(
            "concat conditioning needs conditioned training data",
        ));
    }
    let (width, height) = data.shape()?;
    let steps = sched.steps();
    let d = width * height;
    let mut model = AffinePredictor::with_cond_mode(steps, width, height, cond_mode);
    let use_cond = cond_mode == CondMode::Concat;

    let draw_item =
        |rng: &mut R, t: usize| -> Result<(ImageBuffer, Option<ImageBuffer>, ImageBuffer)> {
            let (x0, c) = data.draw(rng);
            if use_cond && c.is_none() {
                return Err(Error::MissingCondition);
            }
            let eps = ImageBuffer::gaussian(width, height, rng);
            let ab = sched.alpha_bar(t)?;
            let x_t = x0.lincomb(ab.sqrt(), &eps, (1.0 - ab).sqrt())?;
            Ok((x_t, if use_cond { c } else { None }, eps))
        };

    let mut initial_loss = 0.0;
    for _ in 0..PROBE_DRAWS {
        let t = rng.random_range(1..=steps);
        let (x_t, c, eps) = draw_item(rng, t)?;
        let pred = model.predict(&x_t, NoiseLevel::at_step(sched, t)?, c.as_ref())?;
        initial_loss += squared_distance(&pred, &eps) / d as f64;
    }
    initial_loss /= PROBE_DRAWS as f64;

    let tail_start = sgd.iterations / 2;
    let mut tail_count = vec![0usize; steps];
    let mut tail_a = vec![0.0; steps];
    let mut tail_g = vec![0.0; steps];
    let mut tail_b = vec![0.0; steps * d];

    let epoch_len = sgd.iterations.div_ceil(EPOCHS);
    let mut epoch_losses = Vec::with_capacity(EPOCHS);
    let mut epoch_sum = 0.0;
    let mut epoch_items = 0usize;

    let mut grad_b = vec![0.0; d];
    for iter in 0..sgd.iterations {
        let t = rng.random_range(1..=steps);
        let (mut grad_a, mut grad_g) = (0.0, 0.0);
        grad_b.iter_mut().for_each(|v| *v = 0.0);
        let (a, g) = (model.a[t - 1], model.g[t - 1]);
        let row = (t - 1) * d;
        for _ in 0..sgd.batch {
            let (x_t, c, eps) = draw_item(rng, t)?;
            let mut item_loss = 0.0;
            for p in 0..d {
                let x = x_t.as_slice()[p];
                let cp = c.as_ref().map_or(0.0, |c| c.as_slice()[p]);
                let r = a * x + model.b[row + p] + g * cp - eps.as_slice()[p];
                item_loss += r * r;
                grad_a += r * x;
                grad_g += r * cp;
                grad_b[p] += r;
            }
            epoch_sum += item_loss / d as f64;
            epoch_items += 1;
        }
        let scale = 2.0 * sgd.lr / sgd.batch as f64;
        model.a[t - 1] -= scale * grad_a / d as f64;
        if use_cond {
            model.g[t - 1] -= scale * grad_g / d as f64;
        }
        for p in 0..d {
            model.b[row + p] -= scale * grad_b[p];
        }

        if iter >= tail_start {
            tail_count[t - 1] += 1;
            tail_a[t - 1] += model.a[t - 1];
            tail_g[t - 1] += model.g[t - 1];
            for p in 0..d {
                tail_b[row + p] += model.b[row + p];
            }
        }

        if (iter + 1) % epoch_len == 0 || iter + 1 == sgd.iterations {
            let loss = epoch_sum / epoch_items as f64;
            if !loss.is_finite() || loss > 10.0 * initial_loss {
                return Err(Error::Divergence {
                    iteration: iter + 1,
                    loss,
                    initial: initial_loss,
                });
            }
            epoch_losses.push(loss);
            epoch_sum = 0.0;
            epoch_items = 0;
        }
    }

    for t in 0..steps {
        let n = tail_count[t];
        if n > 0 {
            let n = n as f64;
            model.a[t] = tail_a[t] / n;
            model.g[t] = tail_g[t] / n;
            for p in 0..d {
                model.b[t * d + p] = tail_b[t * d + p] / n;
            }
        }
    }

    Ok(AffineTraining {
        predictor: model,
        initial_loss,
        epoch_losses,
    })
}

fn squared_distance(a: &ImageBuffer, b: &ImageBuffer) -> f64 {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y) * (x - y))
        .sum()
}
