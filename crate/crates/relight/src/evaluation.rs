//! RMSE/PSNR/SSIM on human regions, single-image and sequential-rotation
//! evaluation protocols, and the ablation table harness.

use crate::error::{Error, Result};
use crate::imaging::{PortraitImage, SegMask};
use crate::model::Model;
use crate::renderer::RenderMode;
use crate::synthdata::Dataset;
use crate::training::{SceneCache, Trainer, TrainingConfig};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

/// Metric triple, each averaged per image and then over images.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricRecord {
    pub rmse: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub count: usize,
}

impl MetricRecord {
    fn accumulate(&mut self, rmse: f64, psnr: f64, ssim: f64) {
        self.rmse += rmse;
        self.psnr += psnr;
        self.ssim += ssim;
        self.count += 1;
    }

    fn finish(mut self) -> MetricRecord {
        if self.count > 0 {
            let n = self.count as f64;
            self.rmse /= n;
            self.psnr /= n;
            self.ssim /= n;
        }
        self
    }
}

pub const PSNR_CAP_DB: f64 = 100.0;

fn check_metric_dims(a: &PortraitImage, b: &PortraitImage, mask: &SegMask) -> Result<()> {
    if a.width() != b.width()
        || a.height() != b.height()
        || a.width() != mask.width()
        || a.height() != mask.height()
    {
        return Err(Error::shape("metric input dimension mismatch"));
    }
    Ok(())
}

/// Root-mean-square error over masked pixels (3 channels, values in [0,1]).
pub fn rmse(a: &PortraitImage, b: &PortraitImage, mask: &SegMask) -> Result<f64> {
    check_metric_dims(a, b, mask)?;
    let weight: f64 = mask.data().iter().map(|&m| m as f64).sum();
    if weight == 0.0 {
        return Err(Error::config("rmse with empty mask"));
    }
    let hw = a.width() * a.height();
    let mut acc = 0.0f64;
    for c in 0..3 {
        for i in 0..hw {
            let d = (a.planes()[c * hw + i] - b.planes()[c * hw + i]) as f64;
            acc += mask.data()[i] as f64 * d * d;
        }
    }
    Ok((acc / (3.0 * weight)).sqrt())
}

/// `20 log10(1 / rmse)`, capped at 100 dB so identical images keep averages
/// finite.
pub fn psnr_from_rmse(rmse: f64) -> f64 {
    if rmse <= 1e-5 {
        PSNR_CAP_DB
    } else {
        (20.0 * (1.0 / rmse).log10()).min(PSNR_CAP_DB)
    }
}

pub fn psnr(a: &PortraitImage, b: &PortraitImage, mask: &SegMask) -> Result<f64> {
    Ok(psnr_from_rmse(rmse(a, b, mask)?))
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Normalized 11-tap Gaussian.
fn ssim_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0f64; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as isize;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as isize - half;
        *v = (-((d * d) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Symmetric boundary reflection (edge pixel included).
fn mirror(mut idx: isize, n: usize) -> usize {
    let n = n as isize;
    loop {
        if idx < 0 {
            idx = -idx - 1;
        } else if idx >= n {
            idx = 2 * n - idx - 1;
        } else {
            return idx as usize;
        }
    }
}

/// Separable Gaussian filter with symmetric boundaries.
fn gauss_filter(src: &[f64], w: usize, h: usize, kernel: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as isize;
    let mut tmp = vec![0.0f64; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, kv) in kernel.iter().enumerate() {
                let xx = mirror(x as isize + ki as isize - half, w);
                acc += kv * src[y * w + xx];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0f64; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, kv) in kernel.iter().enumerate() {
                let yy = mirror(y as isize + ki as isize - half, h);
                acc += kv * tmp[yy * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Single-scale SSIM: 11x11 Gaussian window (sigma 1.5), K1 = 0.01,
/// K2 = 0.03, dynamic range 1. The per-pixel map is averaged over channels
/// and reduced by a mask-weighted mean.
pub fn ssim(a: &PortraitImage, b: &PortraitImage, mask: &SegMask) -> Result<f64> {
    check_metric_dims(a, b, mask)?;
    let (w, h) = (a.width(), a.height());
    let weight: f64 = mask.data().iter().map(|&m| m as f64).sum();
    if weight == 0.0 {
        return Err(Error::config("ssim with empty mask"));
    }
    let kernel = ssim_kernel();
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let hw = w * h;
    let mut map = vec![0.0f64; hw];
    for c in 0..3 {
        let ac: Vec<f64> = a.planes()[c * hw..(c + 1) * hw].iter().map(|&v| v as f64).collect();
        let bc: Vec<f64> = b.planes()[c * hw..(c + 1) * hw].iter().map(|&v| v as f64).collect();
        // Central moments around the channel means: identical algebra, far
        // less cancellation than E[x^2] - mu^2 for nearly constant images.
        let abar = ac.iter().sum::<f64>() / hw as f64;
        let bbar = bc.iter().sum::<f64>() / hw as f64;
        let za: Vec<f64> = ac.iter().map(|&v| v - abar).collect();
        let zb: Vec<f64> = bc.iter().map(|&v| v - bbar).collect();
        let za2: Vec<f64> = za.iter().map(|&v| v * v).collect();
        let zb2: Vec<f64> = zb.iter().map(|&v| v * v).collect();
        let zazb: Vec<f64> = za.iter().zip(zb.iter()).map(|(&x, &y)| x * y).collect();
        let mu_a = gauss_filter(&ac, w, h, &kernel);
        let mu_b = gauss_filter(&bc, w, h, &kernel);
        let e_za2 = gauss_filter(&za2, w, h, &kernel);
        let e_zb2 = gauss_filter(&zb2, w, h, &kernel);
        let e_zazb = gauss_filter(&zazb, w, h, &kernel);
        for i in 0..hw {
            let da = mu_a[i] - abar;
            let db = mu_b[i] - bbar;
            let va = e_za2[i] - da * da;
            let vb = e_zb2[i] - db * db;
            let cov = e_zazb[i] - da * db;
            let s = ((2.0 * mu_a[i] * mu_b[i] + c1) * (2.0 * cov + c2))
                / ((mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + c1) * (va + vb + c2));
            map[i] += s;
        }
    }
    let mut acc = 0.0f64;
    for i in 0..hw {
        acc += mask.data()[i] as f64 * (map[i] / 3.0);
    }
    Ok(acc / weight)
}

pub fn metrics(a: &PortraitImage, b: &PortraitImage, mask: &SegMask) -> Result<(f64, f64, f64)> {
    let r = rmse(a, b, mask)?;
    Ok((r, psnr_from_rmse(r), ssim(a, b, mask)?))
}

// --- protocols ---------------------------------------------------------------

/// One evaluated scene of the single-image protocol.
#[derive(Clone, Debug)]
pub struct SingleEvalRow {
    pub scene: String,
    pub target: String,
    pub rmse: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub identity_rmse: f64,
    pub identity_psnr: f64,
    pub identity_ssim: f64,
}

#[derive(Clone, Debug)]
pub struct SingleEvalReport {
    pub model: MetricRecord,
    pub identity: MetricRecord,
    pub rows: Vec<SingleEvalRow>,
}

/// Single-image relighting protocol: every test scene is relit toward a
/// randomly chosen target from the same manifest and compared with the true
/// render on the source's human region. The identity baseline (source left
/// unchanged) is reported alongside.
pub fn eval_single(model: &Model, cache: &SceneCache, seed: u64) -> Result<SingleEvalReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut agg_model = MetricRecord::default();
    let mut agg_id = MetricRecord::default();
    let mut rows = Vec::with_capacity(cache.len());
    for xi in 0..cache.len() {
        let yi = rng.random_range(0..cache.len());
        let rx = cache.record(xi).clone();
        let ry = cache.record(yi).clone();
        let (src, src_m) = cache.scene(xi);
        let (tgt, tgt_m) = cache.scene(yi);
        let gt_idx = cache.find(rx.subject_id, ry.env_id, ry.rotation as i32)?;
        let (gt, _) = cache.scene(gt_idx);

        let out = model.relight(src, src_m, tgt, tgt_m, None)?;
        let (r, p, s) = metrics(&out, gt, src_m)?;
        let (ir, ip, is) = metrics(src, gt, src_m)?;
        agg_model.accumulate(r, p, s);
        agg_id.accumulate(ir, ip, is);
        rows.push(SingleEvalRow {
            scene: rx.image.clone(),
            target: ry.image.clone(),
            rmse: r,
            psnr: p,
            ssim: s,
            identity_rmse: ir,
            identity_psnr: ip,
            identity_ssim: is,
        });
    }
    Ok(SingleEvalReport {
        model: agg_model.finish(),
        identity: agg_id.finish(),
        rows,
    })
}

/// The 12 sweep offsets of the sequential protocol: -180, -150, .., +150.
pub fn sweep_offsets() -> Vec<f64> {
    (0..12).map(|k| -180.0 + 30.0 * k as f64).collect()
}

#[derive(Clone, Debug)]
pub struct SequentialEvalRow {
    pub scene: String,
    pub target: String,
    pub offset_degrees: f64,
    pub rmse: f64,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug)]
pub struct SequentialEvalReport {
    pub model: MetricRecord,
    pub rows: Vec<SequentialEvalRow>,
}

/// Sequential relighting protocol: each test scene is relit at all 12 sweep
/// offsets via anchor interpolation (the -180 anchor synthesized by head
/// inversion) and compared to the dataset's true rotated renders.
pub fn eval_sequential(model: &Model, cache: &SceneCache, seed: u64) -> Result<SequentialEvalReport> {
    if model.cfg.render_mode != RenderMode::Mnr || !model.cfg.ot3 {
        return Err(Error::config(
            "sequential evaluation needs the OT3 lighting decoder",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut agg = MetricRecord::default();
    let mut rows = Vec::new();
    for xi in 0..cache.len() {
        let yi = rng.random_range(0..cache.len());
        let rx = cache.record(xi).clone();
        let ry = cache.record(yi).clone();
        let (src, src_m) = cache.scene(xi);
        let (tgt, tgt_m) = cache.scene(yi);
        for offset in sweep_offsets() {
            let steps = crate::synthdata::rotation_steps(offset).expect("multiples of 30");
            let gt_idx = cache.find(rx.subject_id, ry.env_id, ry.rotation as i32 + steps)?;
            let (gt, _) = cache.scene(gt_idx);
            let out = model.relight(src, src_m, tgt, tgt_m, Some(offset))?;
            let (r, p, s) = metrics(&out, gt, src_m)?;
            agg.accumulate(r, p, s);
            rows.push(SequentialEvalRow {
                scene: rx.image.clone(),
                target: ry.image.clone(),
                offset_degrees: offset,
                rmse: r,
                psnr: p,
                ssim: s,
            });
        }
    }
    Ok(SequentialEvalReport {
        model: agg.finish(),
        rows,
    })
}

// --- ablation harness ---------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationVariant {
    Full,
    NoBg,
    NoOt3,
    NoFeat,
    NoCons,
    Concat,
    Mul,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 7] = [
        AblationVariant::Full,
        AblationVariant::NoBg,
        AblationVariant::NoOt3,
        AblationVariant::NoFeat,
        AblationVariant::NoCons,
        AblationVariant::Concat,
        AblationVariant::Mul,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AblationVariant::Full => "full",
            AblationVariant::NoBg => "no-bg",
            AblationVariant::NoOt3 => "no-ot3",
            AblationVariant::NoFeat => "no-feat",
            AblationVariant::NoCons => "no-cons",
            AblationVariant::Concat => "concat",
            AblationVariant::Mul => "mul",
        }
    }

    pub fn parse(s: &str) -> Result<AblationVariant> {
        Self::ALL
            .iter()
            .copied()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown ablation variant '{s}' (expected one of full, no-bg, no-ot3, no-feat, no-cons, concat, mul)"
                ))
            })
    }

    /// Apply the variant's flags to a base training config.
    pub fn configure(&self, base: &TrainingConfig) -> TrainingConfig {
        let mut cfg = base.clone();
        match self {
            AblationVariant::Full => {}
            AblationVariant::NoBg => cfg.model.bg_split = false,
            AblationVariant::NoOt3 => cfg.model.ot3 = false,
            AblationVariant::NoFeat => cfg.feat = false,
            AblationVariant::NoCons => cfg.cons = false,
            AblationVariant::Concat => {
                cfg.model.render_mode = RenderMode::Concat;
                cfg.model.ot3 = false;
            }
            AblationVariant::Mul => {
                cfg.model.render_mode = RenderMode::Mul;
                cfg.model.ot3 = false;
            }
        }
        cfg
    }
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub variant: &'static str,
    pub rmse: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub config_hash: u64,
}

/// Train and evaluate each requested variant at desk scale. Orderings are
/// reported, never asserted.
pub fn eval_ablations(
    variants: &[AblationVariant],
    base: &TrainingConfig,
    train_set: &Dataset,
    test_set: &Dataset,
    steps: u64,
    eval_seed: u64,
) -> Result<Vec<AblationRow>> {
    let train_cache = SceneCache::load(train_set.clone())?;
    let test_cache = SceneCache::load(test_set.clone())?;
    let mut rows = Vec::with_capacity(variants.len());
    for variant in variants {
        let cfg = variant.configure(base);
        let hash = cfg.hash();
        let mut trainer = Trainer::new(cfg)?;
        trainer.run(&train_cache, steps)?;
        let report = eval_single(&trainer.model, &test_cache, eval_seed)?;
        rows.push(AblationRow {
            variant: variant.name(),
            rmse: report.model.rmse,
            psnr: report.model.psnr,
            ssim: report.model.ssim,
            config_hash: hash,
        });
    }
    Ok(rows)
}

// --- CSV emitters ---------------------------------------------------------------

pub fn write_single_csv(path: &Path, report: &SingleEvalReport) -> Result<()> {
    let mut out = String::new();
    out.push_str("scene,target,rmse,psnr,ssim,identity_rmse,identity_psnr,identity_ssim\n");
    for r in &report.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.scene, r.target, r.rmse, r.psnr, r.ssim, r.identity_rmse, r.identity_psnr, r.identity_ssim
        ));
    }
    out.push_str(&format!(
        "mean,,{},{},{},{},{},{}\n",
        report.model.rmse,
        report.model.psnr,
        report.model.ssim,
        report.identity.rmse,
        report.identity.psnr,
        report.identity.ssim
    ));
    std::fs::write(path, out)?;
    Ok(())
}

pub fn write_sequential_csv(path: &Path, report: &SequentialEvalReport) -> Result<()> {
    let mut out = String::new();
    out.push_str("scene,target,offset_degrees,rmse,psnr,ssim\n");
    for r in &report.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.scene, r.target, r.offset_degrees, r.rmse, r.psnr, r.ssim
        ));
    }
    out.push_str(&format!(
        "mean,,,{},{},{}\n",
        report.model.rmse, report.model.psnr, report.model.ssim
    ));
    std::fs::write(path, out)?;
    Ok(())
}

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut out = String::new();
    out.push_str("variant,rmse,psnr,ssim,config_hash\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{:016x}\n",
            r.variant, r.rmse, r.psnr, r.ssim, r.config_hash
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Side-by-side qualitative strip: source | target | output | ground truth.
pub fn side_by_side(images: &[&PortraitImage]) -> PortraitImage {
    assert!(!images.is_empty());
    let h = images[0].height();
    let total_w: usize = images.iter().map(|i| i.width()).sum();
    let mut out = PortraitImage::new(total_w, h);
    let mut x0 = 0;
    for img in images {
        for c in 0..3 {
            for y in 0..img.height().min(h) {
                for x in 0..img.width() {
                    out.set(c, y, x0 + x, img.get(c, y, x));
                }
            }
        }
        x0 += img.width();
    }
    out
}
