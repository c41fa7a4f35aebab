//! Mask cleanup: smoothing, re-thresholding, despeckling and dilation.

use crate::config::DefenseConfig;
use crate::error::{Error, Result};
use crate::image::{BinaryMask, SoftMask};
use crate::localization::binarize;

/// Normalized 1-D Gaussian taps of radius `ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let r = (3.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-r..=r).map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|v| v / sum).collect()
}

/// Reflect index without repeating the edge sample (`dcb|abcd|cba`).
fn reflect(i: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as i64 - 1);
    let m = i.rem_euclid(period);
    (if m < n as i64 { m } else { period - m }) as usize
}

/// Separable Gaussian blur with reflect-padded borders; `sigma = 0` is identity.
pub fn gaussian_smooth(mask: &SoftMask, sigma: f64) -> Result<SoftMask> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Param(format!("sigma {sigma} must be >= 0")));
    }
    if sigma == 0.0 {
        return Ok(mask.clone());
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let (h, w) = (mask.height(), mask.width());
    let src: Vec<f64> = mask.values().iter().map(|&v| v as f64).collect();
    let mut tmp = vec![0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * src[y * w + reflect(x as i64 + j as i64 - r, w)])
                .sum();
        }
    }
    let mut out = vec![0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let v: f64 = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * tmp[reflect(y as i64 + j as i64 - r, h) * w + x])
                .sum();
            out[y * w + x] = v.clamp(0.0, 1.0) as f32;
        }
    }
    SoftMask::new(h, w, out)
}

/// Offsets of a disk structuring element.
pub fn disk(radius: usize) -> Vec<(i64, i64)> {
    let r = radius as i64;
    let mut pts = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dy * dy + dx * dx <= r * r {
                pts.push((dy, dx));
            }
        }
    }
    pts
}

/// Binary dilation by a disk; `radius = 0` is identity.
pub fn dilate(mask: &BinaryMask, radius: usize) -> BinaryMask {
    if radius == 0 {
        return mask.clone();
    }
    let (h, w) = (mask.height(), mask.width());
    let se = disk(radius);
    let mut out = BinaryMask::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            if !mask.get(y, x) {
                continue;
            }
            for &(dy, dx) in &se {
                let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                    out.set(yy as usize, xx as usize, true);
                }
            }
        }
    }
    out
}

/// 8-connected component labels (0 = background) and component sizes
/// indexed by `label - 1`.
pub fn components(mask: &BinaryMask) -> (Vec<usize>, Vec<usize>) {
    let (h, w) = (mask.height(), mask.width());
    let mut labels = vec![0usize; h * w];
    let mut sizes = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        if mask.values()[start] == 0 || labels[start] != 0 {
            continue;
        }
        sizes.push(0);
        let id = sizes.len();
        labels[start] = id;
        stack.push(start);
        while let Some(p) = stack.pop() {
            sizes[id - 1] += 1;
            let (y, x) = ((p / w) as i64, (p % w) as i64);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (yy, xx) = (y + dy, x + dx);
                    if yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
                        continue;
                    }
                    let q = yy as usize * w + xx as usize;
                    if mask.values()[q] == 1 && labels[q] == 0 {
                        labels[q] = id;
                        stack.push(q);
                    }
                }
            }
        }
    }
    (labels, sizes)
}

/// Drops 8-connected components with fewer than `min_area` pixels.
pub fn remove_small_components(mask: &BinaryMask, min_area: usize) -> BinaryMask {
    let (labels, sizes) = components(mask);
    let vals = labels.iter().map(|&l| u8::from(l != 0 && sizes[l - 1] >= min_area)).collect();
    BinaryMask::new(mask.height(), mask.width(), vals).expect("same shape")
}

/// Intermediate masks of [`refine`].
#[derive(Debug, Clone)]
pub struct RefineStages {
    pub initial: BinaryMask,
    pub smoothed: SoftMask,
    pub rebinarized: BinaryMask,
    pub despeckled: BinaryMask,
}

#[derive(Debug, Clone)]
pub struct Refined {
    pub mask: BinaryMask,
    /// Nothing survived refinement.
    pub no_patch: bool,
    pub stages: RefineStages,
}

/// Threshold, smooth, threshold again, drop small components, dilate.
pub fn refine(raw: &SoftMask, cfg: &DefenseConfig) -> Result<Refined> {
    let initial = binarize(raw, cfg.tau_bin)?;
    let smoothed = gaussian_smooth(&SoftMask::from(&initial), cfg.sigma_smooth)?;
    let rebinarized = binarize(&smoothed, cfg.tau_bin)?;
    let despeckled = remove_small_components(&rebinarized, cfg.min_area);
    let mask = dilate(&despeckled, cfg.dilate_radius);
    let no_patch = mask.is_all_zero();
    if no_patch {
        log::warn!("refined mask is empty; no patch found");
    }
    Ok(Refined { mask, no_patch, stages: RefineStages { initial, smoothed, rebinarized, despeckled } })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask_strategy(h: usize, w: usize) -> impl Strategy<Value = BinaryMask> {
        prop::collection::vec(prop::bool::weighted(0.3), h * w)
            .prop_map(move |v| BinaryMask::new(h, w, v.into_iter().map(u8::from).collect()).unwrap())
    }

    #[test]
    fn zero_sigma_is_identity() {
        let s = SoftMask::new(2, 2, vec![0.1, 0.9, 0.3, 0.0]).unwrap();
        assert_eq!(gaussian_smooth(&s, 0.0).unwrap(), s);
    }

    #[test]
    fn impulse_response_matches_analytic_kernel() {
        let mut m = BinaryMask::zeros(15, 15);
        m.set(7, 7, true);
        let out = gaussian_smooth(&SoftMask::from(&m), 1.0).unwrap();
        // analytic: 2-D center weight = (1 / sum_{|x|<=3} exp(-x²/2))²
        let z: f64 = (-3i32..=3).map(|x| (-(x * x) as f64 / 2.0).exp()).sum();
        assert!((out.get(7, 7) as f64 - 1.0 / (z * z)).abs() < 1e-6);
        let total: f64 = out.values().iter().map(|&v| v as f64).sum();
        assert!((total - 1.0).abs() < 1e-5);
    }

    #[test]
    fn constant_ones_stay_ones() {
        let out = gaussian_smooth(&SoftMask::from(&BinaryMask::ones(5, 7)), 1.5).unwrap();
        assert!(out.values().iter().all(|&v| (v - 1.0).abs() < 1e-6));
    }

    #[test]
    fn unit_disk_is_plus_shape() {
        let mut m = BinaryMask::zeros(9, 9);
        m.set(4, 4, true);
        let d = dilate(&m, 1);
        let expected: Vec<(usize, usize)> = vec![(3, 4), (4, 3), (4, 4), (4, 5), (5, 4)];
        assert_eq!(d.count(), 5);
        for (y, x) in expected {
            assert!(d.get(y, x));
        }
        assert_eq!(dilate(&m, 0), m);
        assert_eq!(dilate(&BinaryMask::ones(4, 4), 2), BinaryMask::ones(4, 4));
    }

    #[test]
    fn empty_raw_flags_no_patch() {
        let r = refine(&SoftMask::zeros(8, 8), &DefenseConfig::default()).unwrap();
        assert!(r.no_patch);
        assert!(r.mask.is_all_zero());
    }

    #[test]
    fn blob_with_speckles_hand_instance() {
        // 16x16: 6x6 blob at rows/cols 5..11, isolated speckles at (1,1) and (14,13)
        let mut vals = vec![0f32; 256];
        for y in 5..11 {
            for x in 5..11 {
                vals[y * 16 + x] = 1.0;
            }
        }
        vals[16 + 1] = 1.0;
        vals[14 * 16 + 13] = 1.0;
        let raw = SoftMask::new(16, 16, vals).unwrap();
        let cfg = DefenseConfig { sigma_smooth: 1.0, tau_bin: 0.5, dilate_radius: 2, min_area: 4, ..DefenseConfig::default() };
        let r = refine(&raw, &cfg).unwrap();
        // worked by hand: a lone pixel blurs to ~0.21 and each blob corner to
        // ~0.49, both below 0.5; edges stay at ~0.70
        assert!(!r.stages.rebinarized.get(1, 1));
        assert!(!r.stages.rebinarized.get(14, 13));
        assert!(!r.stages.rebinarized.get(5, 5) && !r.stages.rebinarized.get(10, 10));
        assert!(r.stages.rebinarized.get(5, 6) && r.stages.rebinarized.get(6, 5));
        assert_eq!(r.stages.rebinarized.count(), 32);
        // radius-2 disk grows each side by 2 pixels
        assert!(r.mask.get(3, 7) && r.mask.get(12, 7) && r.mask.get(7, 3) && r.mask.get(7, 12));
        assert!(!r.mask.get(2, 7) && !r.mask.get(13, 7));
        assert!(!r.mask.get(1, 1) && !r.mask.get(14, 13));
        assert_eq!(r.mask.count(), 76);
    }

    fn direct_blur(m: &SoftMask, sigma: f64) -> Vec<f64> {
        // non-separable 2-D reference with explicit mirrored coordinates
        let (h, w) = (m.height() as i64, m.width() as i64);
        let r = (3.0 * sigma).ceil() as i64;
        let mirror = |i: i64, n: i64| -> i64 {
            let mut i = i;
            while i < 0 || i >= n {
                i = if i < 0 { -i } else { 2 * (n - 1) - i };
            }
            i
        };
        let mut z = 0.0;
        for dy in -r..=r {
            for dx in -r..=r {
                z += (-((dy * dy + dx * dx) as f64) / (2.0 * sigma * sigma)).exp();
            }
        }
        let mut out = vec![0.0; (h * w) as usize];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let wgt = (-((dy * dy + dx * dx) as f64) / (2.0 * sigma * sigma)).exp() / z;
                        acc += wgt * m.get(mirror(y + dy, h) as usize, mirror(x + dx, w) as usize) as f64;
                    }
                }
                out[(y * w + x) as usize] = acc;
            }
        }
        out
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn separable_blur_matches_direct_oracle(vals in prop::collection::vec(0f32..=1.0, 63), sigma in 0.3f64..2.5) {
            let m = SoftMask::new(7, 9, vals).unwrap();
            let got = gaussian_smooth(&m, sigma).unwrap();
            for (g, e) in got.values().iter().zip(direct_blur(&m, sigma)) {
                prop_assert!((*g as f64 - e).abs() < 1e-5);
            }
        }

        #[test]
        fn dilation_is_extensive_and_monotone(m in mask_strategy(10, 12), r in 0usize..4) {
            let d1 = dilate(&m, r);
            let d2 = dilate(&m, r + 1);
            prop_assert!(m.is_subset_of(&d1));
            prop_assert!(d1.is_subset_of(&d2));
        }

        #[test]
        fn despeckle_is_idempotent(m in mask_strategy(10, 10), a in 1usize..8) {
            let once = remove_small_components(&m, a);
            prop_assert_eq!(remove_small_components(&once, a), once.clone());
            prop_assert!(once.is_subset_of(&m));
        }

        #[test]
        fn refine_contains_despeckled_mask(vals in prop::collection::vec(0f32..=1.0, 100)) {
            let raw = SoftMask::new(10, 10, vals).unwrap();
            let r = refine(&raw, &DefenseConfig::default()).unwrap();
            prop_assert!(r.stages.despeckled.is_subset_of(&r.mask));
            let again = refine(&raw, &DefenseConfig::default()).unwrap();
            prop_assert_eq!(again.mask, r.mask);
        }
    }
}
