//! Reflection-intensity prior: patch segmentation, per-patch intensity, and
//! sinusoidal prior encoding.
//!
//! The intensity of a patch pair is `Mean(R) / (Mean(R) + Mean(T))`, a
//! normalized score in `[0, 1]` (1 means the patch is pure reflection). The
//! legacy ratio `Mean(R) / Mean(T)` is kept as a diagnostic only: it blows up
//! when the transmission layer vanishes, which is exactly the hazard the
//! normalized form removes.

use std::fmt;

use crate::synthesis::Image;

#[derive(Debug, Clone, PartialEq)]
pub enum PriorError {
    /// Image dimensions must be divisible by the patch grid; resize first.
    NotDivisible { height: usize, width: usize, grid: usize },
    DimensionMismatch { left: (usize, usize), right: (usize, usize) },
    /// Legacy ratio is undefined when the transmission mean is zero.
    ZeroTransmissionMean,
    /// Encoding dimension must be even (sin/cos pairs).
    OddEncodingDim { dim: usize },
    InvalidGrid { grid: usize },
}

impl fmt::Display for PriorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PriorError::NotDivisible { height, width, grid } => write!(
                f,
                "image {height}x{width} is not divisible by patch grid {grid}; \
                 resize the image to a multiple of the grid"
            ),
            PriorError::DimensionMismatch { left, right } => {
                write!(f, "patch dimensions {left:?} and {right:?} do not match")
            }
            PriorError::ZeroTransmissionMean => write!(
                f,
                "legacy reflection intensity divides by Mean(T) == 0; \
                 use the normalized intensity instead"
            ),
            PriorError::OddEncodingDim { dim } => {
                write!(f, "prior encoding dimension must be even, got {dim}")
            }
            PriorError::InvalidGrid { grid } => write!(f, "patch grid must be >= 1, got {grid}"),
        }
    }
}

impl std::error::Error for PriorError {}

pub type PriorResult<V> = Result<V, PriorError>;

/// Per-patch reflection intensities on a `grid x grid` tiling, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorMap {
    pub grid: usize,
    pub values: Vec<f64>,
}

impl PriorMap {
    pub fn new(grid: usize, values: Vec<f64>) -> PriorResult<Self> {
        if grid == 0 || values.len() != grid * grid {
            return Err(PriorError::InvalidGrid { grid });
        }
        Ok(PriorMap { grid, values })
    }

    pub fn zeros(grid: usize) -> Self {
        PriorMap { grid, values: vec![0.0; grid * grid] }
    }

    pub fn uniform(grid: usize, value: f64) -> Self {
        PriorMap { grid, values: vec![value; grid * grid] }
    }

    pub fn value(&self, py: usize, px: usize) -> f64 {
        self.values[py * self.grid + px]
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Expand to a grayscale heatmap: `round(v·255)` replicated per patch
    /// block. `out_h`/`out_w` must be multiples of the grid.
    pub fn heatmap_bytes(&self, out_h: usize, out_w: usize) -> PriorResult<Vec<u8>> {
        if out_h % self.grid != 0 || out_w % self.grid != 0 {
            return Err(PriorError::NotDivisible { height: out_h, width: out_w, grid: self.grid });
        }
        let (bh, bw) = (out_h / self.grid, out_w / self.grid);
        let mut out = vec![0u8; out_h * out_w];
        for y in 0..out_h {
            for x in 0..out_w {
                let v = self.value(y / bh, x / bw);
                out[y * out_w + x] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
        Ok(out)
    }
}

/// Sinusoidal encodings of a prior map: `grid x grid` patches by `dim`
/// features.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorFeatures {
    pub grid: usize,
    pub dim: usize,
    /// `values[patch * dim + feature]`, patch row-major.
    pub values: Vec<f64>,
}

/// Split an image into a non-overlapping `grid x grid` tiling, row-major.
pub fn patch_grid(img: &Image, grid: usize) -> PriorResult<Vec<Image>> {
    if grid == 0 {
        return Err(PriorError::InvalidGrid { grid });
    }
    if img.height % grid != 0 || img.width % grid != 0 {
        return Err(PriorError::NotDivisible { height: img.height, width: img.width, grid });
    }
    let (ph, pw) = (img.height / grid, img.width / grid);
    let mut patches = Vec::with_capacity(grid * grid);
    for py in 0..grid {
        for px in 0..grid {
            let mut patch = Image::new(ph, pw);
            for y in 0..ph {
                for x in 0..pw {
                    for c in 0..3 {
                        patch.set(y, x, c, img.get(py * ph + y, px * pw + x, c));
                    }
                }
            }
            patches.push(patch);
        }
    }
    Ok(patches)
}

/// Normalized reflection intensity `Mean(R) / (Mean(R) + Mean(T))`.
///
/// A patch where both layers are black carries no reflection contamination,
/// so the 0/0 case returns 0.
pub fn reflection_intensity(t_patch: &Image, r_patch: &Image) -> PriorResult<f64> {
    check_dims(t_patch, r_patch)?;
    let (mt, mr) = (t_patch.mean(), r_patch.mean());
    if mr + mt == 0.0 {
        return Ok(0.0);
    }
    Ok(mr / (mr + mt))
}

/// Legacy ratio `Mean(R) / Mean(T)`. Diagnostic only; errors on the
/// vanishing-transmission case rather than returning infinity.
pub fn legacy_reflection_intensity(t_patch: &Image, r_patch: &Image) -> PriorResult<f64> {
    check_dims(t_patch, r_patch)?;
    let (mt, mr) = (t_patch.mean(), r_patch.mean());
    if mt == 0.0 {
        return Err(PriorError::ZeroTransmissionMean);
    }
    Ok(mr / mt)
}

fn check_dims(a: &Image, b: &Image) -> PriorResult<()> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(PriorError::DimensionMismatch {
            left: (a.height, a.width),
            right: (b.height, b.width),
        });
    }
    Ok(())
}

/// Per-patch reflection intensity over aligned tilings of `t` and `r`.
pub fn prior_map(t: &Image, r: &Image, grid: usize) -> PriorResult<PriorMap> {
    check_dims(t, r)?;
    let t_patches = patch_grid(t, grid)?;
    let r_patches = patch_grid(r, grid)?;
    let values = t_patches
        .iter()
        .zip(r_patches.iter())
        .map(|(tp, rp)| reflection_intensity(tp, rp))
        .collect::<PriorResult<Vec<f64>>>()?;
    PriorMap::new(grid, values)
}

/// Sinusoidal encoding of each patch's scalar prior `p`:
/// `out[2i] = sin(p / 10000^(2i/dim))`, `out[2i+1] = cos(p / 10000^(2i/dim))`.
pub fn encode_prior(map: &PriorMap, dim: usize) -> PriorResult<PriorFeatures> {
    if dim == 0 || dim % 2 != 0 {
        return Err(PriorError::OddEncodingDim { dim });
    }
    let half = dim / 2;
    let mut values = vec![0.0; map.values.len() * dim];
    for (patch, &p) in map.values.iter().enumerate() {
        let base = patch * dim;
        for i in 0..half {
            let divisor = 10000f64.powf(2.0 * i as f64 / dim as f64);
            let arg = p / divisor;
            values[base + 2 * i] = arg.sin();
            values[base + 2 * i + 1] = arg.cos();
        }
    }
    Ok(PriorFeatures { grid: map.grid, dim, values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Seed;

    fn random_image(h: usize, w: usize, rng: &mut crate::rng::Rng) -> Image {
        let mut img = Image::new(h, w);
        for v in img.data.iter_mut() {
            *v = rng.next_f64();
        }
        img
    }

    #[test]
    fn patch_grid_degenerate_and_counts() {
        let mut rng = Seed::new(1).rng();
        let img = random_image(56, 56, &mut rng);
        let whole = patch_grid(&img, 1).unwrap();
        assert_eq!(whole.len(), 1);
        assert_eq!(whole[0], img);

        let patches = patch_grid(&img, 7).unwrap();
        assert_eq!(patches.len(), 49);
        assert!(patches.iter().all(|p| p.height == 8 && p.width == 8));
    }

    #[test]
    fn patch_grid_reassembles_exactly() {
        let mut rng = Seed::new(2).rng();
        let img = random_image(12, 12, &mut rng);
        let grid = 3;
        let patches = patch_grid(&img, grid).unwrap();
        let (ph, pw) = (4, 4);
        let mut rebuilt = Image::new(12, 12);
        for (i, patch) in patches.iter().enumerate() {
            let (py, px) = (i / grid, i % grid);
            for y in 0..ph {
                for x in 0..pw {
                    for c in 0..3 {
                        rebuilt.set(py * ph + y, px * pw + x, c, patch.get(y, x, c));
                    }
                }
            }
        }
        assert_eq!(img, rebuilt);
    }

    #[test]
    fn patch_grid_rejects_indivisible() {
        let img = Image::new(10, 10);
        assert!(matches!(patch_grid(&img, 3), Err(PriorError::NotDivisible { .. })));
    }

    #[test]
    fn intensity_limits() {
        let black = Image::new(4, 4);
        let gray = Image::filled(4, 4, 0.5);
        assert_eq!(reflection_intensity(&gray, &black).unwrap(), 0.0);
        assert_eq!(reflection_intensity(&gray, &gray.clone()).unwrap(), 0.5);
        assert_eq!(reflection_intensity(&black, &gray).unwrap(), 1.0);
        assert_eq!(reflection_intensity(&black, &black.clone()).unwrap(), 0.0);
    }

    #[test]
    fn legacy_intensity_and_hazard() {
        let gray = Image::filled(4, 4, 0.5);
        let black = Image::new(4, 4);
        assert_eq!(legacy_reflection_intensity(&gray, &gray.clone()).unwrap(), 1.0);
        assert_eq!(legacy_reflection_intensity(&gray, &black).unwrap(), 0.0);
        assert!(matches!(
            legacy_reflection_intensity(&black, &gray),
            Err(PriorError::ZeroTransmissionMean)
        ));
    }

    #[test]
    fn prior_map_piecewise_construction() {
        let t = Image::filled(4, 4, 0.5);
        let mut r = Image::new(4, 4);
        for y in 0..4 {
            for x in 0..2 {
                for c in 0..3 {
                    r.set(y, x, c, 0.5);
                }
            }
        }
        let map = prior_map(&t, &r, 2).unwrap();
        assert_eq!(map.values, vec![0.5, 0.0, 0.5, 0.0]);
    }

    #[test]
    fn prior_map_matches_brute_force_means() {
        let mut rng = Seed::new(3).rng();
        for _ in 0..20 {
            let t = random_image(56, 56, &mut rng);
            let r = random_image(56, 56, &mut rng);
            for grid in [1usize, 7, 14, 28] {
                let map = prior_map(&t, &r, grid).unwrap();
                let side = 56 / grid;
                for py in 0..grid {
                    for px in 0..grid {
                        let mut st = 0.0;
                        let mut sr = 0.0;
                        for y in 0..side {
                            for x in 0..side {
                                for c in 0..3 {
                                    st += t.get(py * side + y, px * side + x, c);
                                    sr += r.get(py * side + y, px * side + x, c);
                                }
                            }
                        }
                        let n = (side * side * 3) as f64;
                        let expect = (sr / n) / (sr / n + st / n);
                        assert!((map.value(py, px) - expect).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn encoding_at_zero_and_half() {
        let map = PriorMap::new(1, vec![0.0]).unwrap();
        let feats = encode_prior(&map, 64).unwrap();
        for i in 0..32 {
            assert_eq!(feats.values[2 * i], 0.0);
            assert_eq!(feats.values[2 * i + 1], 1.0);
        }
        let map = PriorMap::new(1, vec![0.5]).unwrap();
        let feats = encode_prior(&map, 64).unwrap();
        assert!((feats.values[0] - 0.479426).abs() < 1e-6);
        assert!((feats.values[1] - 0.877583).abs() < 1e-6);
    }

    #[test]
    fn encoding_satisfies_pythagorean_identity() {
        let mut rng = Seed::new(4).rng();
        let values: Vec<f64> = (0..49).map(|_| rng.next_f64()).collect();
        let map = PriorMap::new(7, values).unwrap();
        let feats = encode_prior(&map, 64).unwrap();
        for patch in 0..49 {
            for i in 0..32 {
                let s = feats.values[patch * 64 + 2 * i];
                let c = feats.values[patch * 64 + 2 * i + 1];
                assert!((s * s + c * c - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn encoding_rejects_odd_dim() {
        let map = PriorMap::new(1, vec![0.3]).unwrap();
        assert!(matches!(encode_prior(&map, 63), Err(PriorError::OddEncodingDim { dim: 63 })));
    }

    #[test]
    fn heatmap_replicates_blocks() {
        let map = PriorMap::new(2, vec![0.0, 0.25, 0.5, 1.0]).unwrap();
        let bytes = map.heatmap_bytes(4, 4).unwrap();
        assert_eq!(bytes[0], 0);
        assert_eq!(bytes[3], 64);
        assert_eq!(bytes[4 * 2], 128);
        assert_eq!(bytes[4 * 3 + 3], 255);
        assert_eq!(bytes[1], bytes[0]);
        assert_eq!(bytes[4], bytes[0]);
    }
}
