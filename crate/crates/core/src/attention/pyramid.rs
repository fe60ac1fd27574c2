use super::TokenBundle;
use crate::error::{Result, StaError};
use crate::tensor::{bilinear_resize, Grid, Kernel3};

/// Multi-scale stack of equal-channel grids, largest first.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    levels: Vec<Grid>,
}

impl FeaturePyramid {
    pub fn new(levels: Vec<Grid>) -> Result<Self> {
        if levels.is_empty() {
            return Err(StaError::invalid("levels", "pyramid needs at least one level"));
        }
        for pair in levels.windows(2) {
            let (a, b) = (&pair[0], &pair[1]);
            if a.channels() != b.channels() {
                return Err(StaError::invalid("levels", "channel counts differ between levels"));
            }
            let shrinks =
                b.height() <= a.height() && b.width() <= a.width() && b.height() * b.width() < a.height() * a.width();
            if !shrinks {
                return Err(StaError::invalid(
                    "levels",
                    format!("level {}×{} does not shrink from {}×{}", b.height(), b.width(), a.height(), a.width()),
                ));
            }
        }
        Ok(Self { levels })
    }

    pub fn levels(&self) -> &[Grid] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }
}

/// Reshapes the spatial tokens of `tokens` (row-major, `grid_h × grid_w`) to a
/// grid, bilinearly resizes it to every scale and smooths each level with its
/// kernel.
pub fn build_pyramid(
    tokens: &TokenBundle,
    grid_h: usize,
    grid_w: usize,
    scales: &[(usize, usize)],
    kernels: &[Kernel3],
) -> Result<FeaturePyramid> {
    let t = tokens.tokens();
    if grid_h * grid_w != t.rows() {
        return Err(StaError::invalid("grid", format!("{} tokens do not factor as {grid_h}×{grid_w}", t.rows())));
    }
    if kernels.len() != scales.len() {
        return Err(StaError::LengthMismatch {
            what: "pyramid kernels",
            expected: scales.len(),
            actual: kernels.len(),
        });
    }
    let base = Grid::new(grid_h, grid_w, t.cols(), t.data().to_vec())?;
    let levels = scales
        .iter()
        .zip(kernels)
        .map(|(&(h, w), k)| Ok(bilinear_resize(&base, h, w)?.conv3x3(k)))
        .collect::<Result<Vec<_>>>()?;
    FeaturePyramid::new(levels)
}

/// Per-level `conv3x3(p2d + p3d)`.
pub fn fuse_pyramids(p2d: &FeaturePyramid, p3d: &FeaturePyramid, kernels: &[Kernel3]) -> Result<FeaturePyramid> {
    if p2d.len() != p3d.len() || kernels.len() != p2d.len() {
        return Err(StaError::LengthMismatch {
            what: "pyramid levels",
            expected: p2d.len(),
            actual: if p3d.len() != p2d.len() { p3d.len() } else { kernels.len() },
        });
    }
    let levels = p2d
        .levels
        .iter()
        .zip(&p3d.levels)
        .zip(kernels)
        .map(|((a, b), k)| Ok(a.add(b)?.conv3x3(k)))
        .collect::<Result<Vec<_>>>()?;
    FeaturePyramid::new(levels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Matrix, IDENTITY_KERNEL};

    fn grid(h: usize, w: usize, data: &[f64]) -> Grid {
        Grid::new(h, w, 1, data.to_vec()).unwrap()
    }

    #[test]
    fn identity_scale_reproduces_token_grid() {
        let t = Matrix::from_fn(6, 2, |r, c| (r * 2 + c) as f64);
        let p = build_pyramid(&TokenBundle::from_tokens(t.clone()), 2, 3, &[(2, 3)], &[IDENTITY_KERNEL]).unwrap();
        assert_eq!(p.levels()[0].data(), t.data());
        assert_eq!(p.levels()[0].get(1, 2, 1), t.get(5, 1));
    }

    #[test]
    fn constant_tokens_give_constant_levels() {
        let t = Matrix::from_fn(4, 3, |_, _| 2.5);
        let scales = [(8, 8), (4, 4), (2, 2), (1, 1)];
        let p = build_pyramid(&TokenBundle::from_tokens(t), 2, 2, &scales, &[IDENTITY_KERNEL; 4]).unwrap();
        for l in p.levels() {
            assert!(l.data().iter().all(|&v| v == 2.5));
        }
    }

    #[test]
    fn upsample_two_by_two() {
        // half-pixel taps for 2 → 4: sources -0.25→0, 0.25, 0.75, 1.25→1
        let t = Matrix::from_rows(&[vec![0.0], vec![1.0], vec![2.0], vec![3.0]]).unwrap();
        let p = build_pyramid(&TokenBundle::from_tokens(t), 2, 2, &[(4, 4)], &[IDENTITY_KERNEL]).unwrap();
        let axis = [0.0, 0.25, 0.75, 1.0];
        let l = &p.levels()[0];
        for (y, fy) in axis.iter().enumerate() {
            for (x, fx) in axis.iter().enumerate() {
                // bilinear of [[0,1],[2,3]] is fx + 2 fy
                let expect = fx + 2.0 * fy;
                assert!((l.get(y, x, 0) - expect).abs() < 1e-15, "({y},{x})");
            }
        }
    }

    #[test]
    fn non_factorable_token_count() {
        let t = Matrix::zeros(5, 2);
        assert!(build_pyramid(&TokenBundle::from_tokens(t), 2, 3, &[(2, 3)], &[IDENTITY_KERNEL]).is_err());
    }

    #[test]
    fn levels_must_shrink() {
        assert!(FeaturePyramid::new(vec![grid(2, 2, &[0.0; 4]), grid(2, 2, &[0.0; 4])]).is_err());
        assert!(FeaturePyramid::new(vec![grid(2, 2, &[0.0; 4]), grid(1, 1, &[0.0])]).is_ok());
        assert!(FeaturePyramid::new(vec![]).is_err());
    }

    #[test]
    fn fusion_with_identity_kernel_sums() {
        let a = FeaturePyramid::new(vec![grid(2, 2, &[1.0, 2.0, 3.0, 4.0]), grid(1, 1, &[5.0])]).unwrap();
        let b = FeaturePyramid::new(vec![grid(2, 2, &[0.5, 0.5, -1.0, 0.0]), grid(1, 1, &[1.0])]).unwrap();
        let f = fuse_pyramids(&a, &b, &[IDENTITY_KERNEL; 2]).unwrap();
        assert_eq!(f.levels()[0].data(), &[1.5, 2.5, 2.0, 4.0]);
        assert_eq!(f.levels()[1].data(), &[6.0]);

        let z = FeaturePyramid::new(vec![grid(2, 2, &[0.0; 4]), grid(1, 1, &[0.0])]).unwrap();
        assert_eq!(fuse_pyramids(&a, &z, &[IDENTITY_KERNEL; 2]).unwrap(), a);
    }

    #[test]
    fn fusion_single_level_hand_convolution() {
        let a = FeaturePyramid::new(vec![grid(3, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0])]).unwrap();
        let b = FeaturePyramid::new(vec![grid(3, 3, &[1.0; 9])]).unwrap();
        let k: Kernel3 = [[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]];
        let f = fuse_pyramids(&a, &b, &[k]).unwrap();
        // sum = [[2,3,4],[5,6,7],[8,9,10]]; laplacian with zero padding
        let expect = [
            3.0 + 5.0 - 8.0,        // (0,0): 3 + 5 - 4·2
            2.0 + 4.0 + 6.0 - 12.0, // (0,1)
            3.0 + 7.0 - 16.0,       // (0,2)
            2.0 + 8.0 + 6.0 - 20.0, // (1,0)
            3.0 + 5.0 + 7.0 + 9.0 - 24.0,
            4.0 + 6.0 + 10.0 - 28.0,
            5.0 + 9.0 - 32.0,
            8.0 + 6.0 + 10.0 - 36.0,
            7.0 + 9.0 - 40.0,
        ];
        assert_eq!(f.levels()[0].data(), &expect);
    }

    #[test]
    fn fusion_shape_mismatch() {
        let a = FeaturePyramid::new(vec![grid(2, 2, &[0.0; 4])]).unwrap();
        let b = FeaturePyramid::new(vec![grid(3, 1, &[0.0; 3])]).unwrap();
        assert!(fuse_pyramids(&a, &b, &[IDENTITY_KERNEL]).is_err());
    }
}
