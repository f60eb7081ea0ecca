//! Image quality scores, eccentricity-banded reports and frame timing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::foveation::StereoMode;
use crate::image::RgbImage;

fn check_dims(a: &RgbImage, b: &RgbImage) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::DimensionMismatch(a.dims(), b.dims()));
    }
    Ok(())
}

fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

/// PSNR in dB for data range 1. Identical images give `+inf`.
pub fn psnr(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    check_dims(a, b)?;
    if a.data.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mse = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum::<f64>()
        / a.data.len() as f64;
    Ok(psnr_from_mse(mse))
}

const SSIM_SIGMA: f64 = 1.5;
const SSIM_TRUNCATE: f64 = 3.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn gaussian_kernel() -> Vec<f64> {
    let r = (SSIM_TRUNCATE * SSIM_SIGMA + 0.5) as isize;
    let k: Vec<f64> = (-r..=r)
        .map(|x| (-0.5 * (x * x) as f64 / (SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Half-sample symmetric index reflection.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

fn filter2(src: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * src[y * w + reflect(x as isize + j as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * tmp[reflect(y as isize + j as isize - r, h) * w + x])
                .sum();
        }
    }
    out
}

/// Per-pixel SSIM averaged over channels, Gaussian window, data range 1.
pub fn ssim_map(a: &RgbImage, b: &RgbImage) -> Result<Vec<f64>> {
    check_dims(a, b)?;
    let (w, h) = a.dims();
    let k = gaussian_kernel();
    let c1 = K1 * K1;
    let c2 = K2 * K2;
    let mut acc = vec![0.0; w * h];
    for c in 0..3 {
        let x: Vec<f64> = a.data.iter().skip(c).step_by(3).map(|&v| v as f64).collect();
        let y: Vec<f64> = b.data.iter().skip(c).step_by(3).map(|&v| v as f64).collect();
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
        let ux = filter2(&x, w, h, &k);
        let uy = filter2(&y, w, h, &k);
        let uxx = filter2(&prod(&x, &x), w, h, &k);
        let uyy = filter2(&prod(&y, &y), w, h, &k);
        let uxy = filter2(&prod(&x, &y), w, h, &k);
        for i in 0..w * h {
            let vx = uxx[i] - ux[i] * ux[i];
            let vy = uyy[i] - uy[i] * uy[i];
            let vxy = uxy[i] - ux[i] * uy[i];
            let num = (2.0 * ux[i] * uy[i] + c1) * (2.0 * vxy + c2);
            let den = (ux[i] * ux[i] + uy[i] * uy[i] + c1) * (vx + vy + c2);
            acc[i] += num / den / 3.0;
        }
    }
    Ok(acc)
}

/// Mean SSIM with the window-radius border cropped.
pub fn ssim(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    let map = ssim_map(a, b)?;
    let (w, h) = a.dims();
    let pad = (SSIM_TRUNCATE * SSIM_SIGMA + 0.5) as usize;
    if w <= 2 * pad || h <= 2 * pad {
        return Err(Error::Image(format!("image {w}x{h} smaller than the SSIM window")));
    }
    let mut sum = 0.0;
    for y in pad..h - pad {
        for x in pad..w - pad {
            sum += map[y * w + x];
        }
    }
    Ok(sum / ((w - 2 * pad) * (h - 2 * pad)) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandScore {
    pub lo_deg: f64,
    pub hi_deg: f64,
    pub pixels: usize,
    /// `None` when the band has no pixels.
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EccentricityBandReport {
    pub step_deg: f64,
    pub bands: Vec<BandScore>,
}

impl EccentricityBandReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("lo_deg,hi_deg,pixels,psnr,ssim\n");
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
        for b in &self.bands {
            s += &format!(
                "{},{},{},{},{}\n",
                b.lo_deg,
                b.hi_deg,
                b.pixels,
                opt(b.psnr),
                opt(b.ssim)
            );
        }
        s
    }
}

/// Scores each annulus `[k·step, (k+1)·step)` of eccentricity up to `max_deg`.
pub fn banded_quality(
    render: &RgbImage,
    reference: &RgbImage,
    ecc_deg: &[f64],
    step_deg: f64,
    max_deg: f64,
) -> Result<EccentricityBandReport> {
    check_dims(render, reference)?;
    if ecc_deg.len() != render.width * render.height {
        return Err(Error::Config("eccentricity map size differs from the image".into()));
    }
    if !(step_deg > 0.0) {
        return Err(Error::Config("band step must be positive".into()));
    }
    let n_bands = (max_deg / step_deg).ceil() as usize;
    let smap = ssim_map(render, reference)?;
    let mut sq = vec![0.0; n_bands];
    let mut ss = vec![0.0; n_bands];
    let mut count = vec![0usize; n_bands];
    for (i, &e) in ecc_deg.iter().enumerate() {
        if !(e >= 0.0 && e < max_deg) {
            continue;
        }
        let b = ((e / step_deg) as usize).min(n_bands - 1);
        count[b] += 1;
        ss[b] += smap[i];
        for c in 0..3 {
            let d = render.data[3 * i + c] as f64 - reference.data[3 * i + c] as f64;
            sq[b] += d * d;
        }
    }
    let bands = (0..n_bands)
        .map(|b| {
            let n = count[b];
            BandScore {
                lo_deg: b as f64 * step_deg,
                hi_deg: ((b + 1) as f64 * step_deg).min(max_deg),
                pixels: n,
                psnr: (n > 0).then(|| psnr_from_mse(sq[b] / (3 * n) as f64)),
                ssim: (n > 0).then(|| ss[b] / n as f64),
            }
        })
        .collect();
    Ok(EccentricityBandReport { step_deg, bands })
}

/// Stage durations of one frame in milliseconds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameTiming {
    /// Mean foveal pass time per eye.
    pub fovea_ms: f64,
    /// Periphery time per rendered viewpoint (mid plus far).
    pub periphery_ms: f64,
    pub blend_ms: f64,
    pub total_ms: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub p95: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Stat {
        if values.is_empty() {
            return Stat::default();
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let idx = ((0.95 * v.len() as f64).ceil() as usize).clamp(1, v.len()) - 1;
        Stat {
            mean: v.iter().sum::<f64>() / v.len() as f64,
            p95: v[idx],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingBreakdown {
    pub mode: StereoMode,
    pub frames: usize,
    pub fovea_ms: Stat,
    pub periphery_ms: Stat,
    pub blend_ms: Stat,
    pub total_ms: Stat,
}

impl TimingBreakdown {
    pub const CSV_HEADER: &'static str =
        "mode,frames,fovea_mean_ms,fovea_p95_ms,periphery_mean_ms,periphery_p95_ms,blend_mean_ms,blend_p95_ms,total_mean_ms,total_p95_ms";

    pub fn csv_row(&self) -> String {
        let mode = serde_json::to_value(self.mode).expect("mode serializes");
        format!(
            "{},{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}",
            mode.as_str().unwrap_or_default(),
            self.frames,
            self.fovea_ms.mean,
            self.fovea_ms.p95,
            self.periphery_ms.mean,
            self.periphery_ms.p95,
            self.blend_ms.mean,
            self.blend_ms.p95,
            self.total_ms.mean,
            self.total_ms.p95
        )
    }
}

pub const WARMUP_FRAMES: usize = 10;
pub const MIN_TIMED_FRAMES: usize = 20;

/// Runs `frame` for the warm-up plus `n_frames` and summarises the timed frames.
pub fn time_pipeline(
    n_frames: usize,
    mode: StereoMode,
    mut frame: impl FnMut(usize) -> Result<FrameTiming>,
) -> Result<TimingBreakdown> {
    if n_frames < MIN_TIMED_FRAMES {
        return Err(Error::TooFewFrames {
            needed: MIN_TIMED_FRAMES,
            got: n_frames,
        });
    }
    for i in 0..WARMUP_FRAMES {
        frame(i)?;
    }
    let mut records = Vec::with_capacity(n_frames);
    for i in 0..n_frames {
        records.push(frame(WARMUP_FRAMES + i)?);
    }
    let col = |f: fn(&FrameTiming) -> f64| Stat::of(&records.iter().map(f).collect::<Vec<_>>());
    Ok(TimingBreakdown {
        mode,
        frames: n_frames,
        fovea_ms: col(|r| r.fovea_ms),
        periphery_ms: col(|r| r.periphery_ms),
        blend_ms: col(|r| r.blend_ms),
        total_ms: col(|r| r.total_ms),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compositor::gaussian_blur;
    use approx::assert_abs_diff_eq;

    fn pair(w: usize, h: usize) -> (RgbImage, RgbImage) {
        let mut a = RgbImage::new(w, h);
        let mut b = RgbImage::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let (xf, yf) = (x as f64, y as f64);
                let mut ca = [0.0f32; 3];
                let mut cb = [0.0f32; 3];
                for c in 0..3 {
                    let va = 0.5 + 0.4 * (0.3 * xf + 0.7 * yf + c as f64).sin();
                    let vb = va + 0.15 * (1.3 * xf * yf / 7.0 + 2.0 * c as f64).sin() * (0.11 * xf).cos();
                    ca[c] = va as f32;
                    cb[c] = vb.clamp(0.0, 1.0) as f32;
                }
                a.set(x, y, ca);
                b.set(x, y, cb);
            }
        }
        (a, b)
    }

    #[test]
    fn matches_reference_implementation() {
        // frozen from scikit-image structural_similarity(gaussian_weights=True,
        // sigma=1.5, use_sample_covariance=False, data_range=1) and its psnr
        for (w, h, s, p) in [
            (23, 17, 0.9760410504349926, 23.450141127783482),
            (40, 31, 0.9534490989506456, 22.23263303953999),
        ] {
            let (a, b) = pair(w, h);
            assert_abs_diff_eq!(ssim(&a, &b).unwrap(), s, epsilon = 1e-6);
            assert_abs_diff_eq!(psnr(&a, &b).unwrap(), p, epsilon = 1e-6);
        }
    }

    #[test]
    fn identical_and_extreme() {
        let (a, b) = pair(16, 16);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        assert_abs_diff_eq!(ssim(&a, &a).unwrap(), 1.0, epsilon = 1e-12);
        let zero = RgbImage::filled(4, 4, [0.0; 3]);
        let one = RgbImage::filled(4, 4, [1.0; 3]);
        assert_eq!(psnr(&zero, &one).unwrap(), 0.0);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        assert_abs_diff_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap(), epsilon = 1e-12);
        assert!(matches!(psnr(&a, &zero), Err(Error::DimensionMismatch(..))));
    }

    fn radial(w: usize, h: usize, deg_per_px: f64) -> Vec<f64> {
        let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
        (0..w * h)
            .map(|i| {
                let (x, y) = ((i % w) as f64 + 0.5, (i / w) as f64 + 0.5);
                ((x - cx).hypot(y - cy)) * deg_per_px
            })
            .collect()
    }

    #[test]
    fn bands_partition_and_self_score() {
        let (a, _) = pair(64, 64);
        let ecc = radial(64, 64, 110.0 / 45.0);
        let rep = banded_quality(&a, &a, &ecc, 5.0, 110.0).unwrap();
        assert_eq!(rep.bands.len(), 22);
        let covered: usize = rep.bands.iter().map(|b| b.pixels).sum();
        assert_eq!(covered, ecc.iter().filter(|&&e| e < 110.0).count());
        for w in rep.bands.windows(2) {
            assert_eq!(w[0].hi_deg, w[1].lo_deg);
        }
        for b in rep.bands.iter().filter(|b| b.pixels > 0) {
            assert_eq!(b.psnr, Some(f64::INFINITY));
        }
        let rep = banded_quality(&a, &a, &radial(64, 64, 0.1), 5.0, 110.0).unwrap();
        assert!(rep.bands[5].psnr.is_none());
    }

    #[test]
    fn fovea_corruption_stays_in_inner_bands() {
        let (a, _) = pair(64, 64);
        let ecc = radial(64, 64, 1.0);
        let mut b = a.clone();
        for (i, &e) in ecc.iter().enumerate() {
            if e < 10.0 {
                b.data[3 * i] = 1.0 - b.data[3 * i];
            }
        }
        let rep = banded_quality(&b, &a, &ecc, 5.0, 110.0).unwrap();
        assert!(rep.bands[0].psnr.unwrap().is_finite());
        assert!(rep.bands[1].psnr.unwrap().is_finite());
        for band in &rep.bands[2..] {
            if band.pixels > 0 {
                assert_eq!(band.psnr, Some(f64::INFINITY));
            }
        }
    }

    #[test]
    fn blurred_periphery_degrades_outward() {
        let (a, _) = pair(96, 96);
        let ecc = radial(96, 96, 1.0);
        let blurred = gaussian_blur(&a, 2.0);
        let mut b = a.clone();
        for (i, &e) in ecc.iter().enumerate() {
            if e >= 20.0 {
                b.data[3 * i..3 * i + 3].copy_from_slice(&blurred.data[3 * i..3 * i + 3]);
            }
        }
        let rep = banded_quality(&b, &a, &ecc, 5.0, 110.0).unwrap();
        for band in &rep.bands[..4] {
            assert_eq!(band.psnr, Some(f64::INFINITY));
        }
        let outer: Vec<f64> = rep.bands[4..9].iter().filter_map(|b| b.psnr).collect();
        assert!(outer.iter().all(|p| p.is_finite() && *p < 40.0), "{outer:?}");
    }

    #[test]
    fn timing_requires_enough_frames_and_skips_warmup() {
        let err = time_pipeline(5, StereoMode::Adaptive, |_| Ok(FrameTiming::default())).unwrap_err();
        assert!(matches!(err, Error::TooFewFrames { needed: 20, got: 5 }));
        let rep = time_pipeline(20, StereoMode::Naive, |i| {
            let v = if i < WARMUP_FRAMES { 1000.0 } else { 1.0 };
            Ok(FrameTiming {
                fovea_ms: v,
                periphery_ms: v,
                blend_ms: v,
                total_ms: v,
            })
        })
        .unwrap();
        assert_eq!(rep.total_ms, Stat { mean: 1.0, p95: 1.0 });
        assert!(rep.csv_row().starts_with("naive,20,"));
    }

    #[test]
    fn injected_sleep_increases_records() {
        use std::time::Duration;
        let run = |sleep_ms: u64| {
            time_pipeline(20, StereoMode::Adaptive, |_| {
                let w = crate::timing::Stopwatch::start();
                std::thread::sleep(Duration::from_millis(sleep_ms));
                let ms = w.elapsed_ms();
                Ok(FrameTiming {
                    blend_ms: ms,
                    total_ms: ms,
                    ..Default::default()
                })
            })
            .unwrap()
        };
        let fast = run(0);
        let slow = run(2);
        assert!(slow.blend_ms.mean > fast.blend_ms.mean);
        assert!(slow.total_ms.p95 >= 2.0);
    }

    #[test]
    fn stat_percentile() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(Stat::of(&v), Stat { mean: 50.5, p95: 95.0 });
    }
}
