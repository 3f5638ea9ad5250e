//! Grad-CAM saliency maps and trigger localization.
//!
//! The map for class `t` at a tapped conv layer is built the usual way:
//! forward pass caching the tap activations, gradient of the class-`t`
//! *logit* (pre-sigmoid) with respect to those activations, channel weights
//! as the spatial mean of that gradient, ReLU of the weighted activation
//! sum, bilinear upsampling to image size, and min-max normalization (an
//! all-zero map stays all-zero).
//!
//! [`localization_score`] turns the qualitative "the heatmap moves onto the
//! trigger" observation into a number: the fraction of total saliency mass
//! inside the (dilated) trigger rectangle.

use std::path::Path;

use crate::dataset::Image;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which tapped conv layer a map was computed from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TapLayer {
    Middle,
    Final,
}

impl TapLayer {
    pub fn name(&self) -> &'static str {
        match self {
            TapLayer::Middle => "middle",
            TapLayer::Final => "final",
        }
    }
}

/// Normalized saliency map at image resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap<F> {
    pub width: usize,
    pub height: usize,
    /// Row-major values in [0, 1].
    pub values: Vec<F>,
    pub layer: TapLayer,
    pub target_class: usize,
}

impl<F: Scalar> SaliencyMap<F> {
    pub fn value(&self, x: usize, y: usize) -> F {
        self.values[y * self.width + x]
    }
}

/// Weighted activation sum before upsampling/normalization; exposed for the
/// module tests, which check non-negativity ahead of normalization.
fn raw_cam<F: Scalar>(acts: &[F], grads: &[F], channels: usize, spatial: usize) -> Vec<F> {
    let mut cam = vec![F::zero(); spatial];
    let inv = F::one() / F::of(spatial as f64);
    for c in 0..channels {
        let g = &grads[c * spatial..(c + 1) * spatial];
        let mut alpha = F::zero();
        for v in g {
            alpha += *v;
        }
        alpha *= inv;
        let a = &acts[c * spatial..(c + 1) * spatial];
        for (out, v) in cam.iter_mut().zip(a) {
            *out += alpha * *v;
        }
    }
    for v in cam.iter_mut() {
        if *v < F::zero() {
            *v = F::zero();
        }
    }
    cam
}

fn bilinear_upsample<F: Scalar>(
    src: &[F],
    (sh, sw): (usize, usize),
    (dh, dw): (usize, usize),
) -> Vec<F> {
    if (sh, sw) == (dh, dw) {
        return src.to_vec();
    }
    let scale = |d: usize, s: usize| {
        if d > 1 {
            (s as f64 - 1.0) / (d as f64 - 1.0)
        } else {
            0.0
        }
    };
    let (fy, fx) = (scale(dh, sh), scale(dw, sw));
    let mut out = Vec::with_capacity(dh * dw);
    for y in 0..dh {
        let sy = y as f64 * fy;
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let ty = F::of(sy - y0 as f64);
        for x in 0..dw {
            let sx = x as f64 * fx;
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(sw - 1);
            let tx = F::of(sx - x0 as f64);
            let one = F::one();
            let v = (one - ty) * (one - tx) * src[y0 * sw + x0]
                + (one - ty) * tx * src[y0 * sw + x1]
                + ty * (one - tx) * src[y1 * sw + x0]
                + ty * tx * src[y1 * sw + x1];
            out.push(v);
        }
    }
    out
}

fn min_max_normalize<F: Scalar>(values: &mut [F]) {
    let mut lo = F::infinity();
    let mut hi = F::neg_infinity();
    for v in values.iter() {
        lo = lo.min(*v);
        hi = hi.max(*v);
    }
    if hi > lo {
        let span = hi - lo;
        for v in values.iter_mut() {
            *v = (*v - lo) / span;
        }
    } else if hi > F::zero() {
        // Constant positive map: everything equally (maximally) salient.
        for v in values.iter_mut() {
            *v = F::one();
        }
    }
    // Constant zero map stays zero.
}

/// Grad-CAM saliency of class `t` for one image at the requested tap.
pub fn gradcam<F: Scalar>(
    model: &Model<F>,
    image: &Image<F>,
    t: usize,
    layer: TapLayer,
) -> Result<SaliencyMap<F>> {
    if t >= model.arch.num_classes {
        return Err(Error::OutOfBounds(format!(
            "class {t} out of range for {} classes",
            model.arch.num_classes
        )));
    }
    let tap = match layer {
        TapLayer::Middle => model.arch.middle_tap,
        TapLayer::Final => model.arch.final_tap,
    };
    let (w, h) = (image.width(), image.height());
    let batch = Tensor::from_vec(&[1, 1, h, w], image.pixels().to_vec())?;
    let pass = model.forward(&batch)?;
    let grads = model.logit_gradient_wrt_tap(&pass, t, tap)?;
    let tap_shape = pass.post_acts[tap].shape();
    let (channels, th, tw) = (tap_shape[1], tap_shape[2], tap_shape[3]);
    let cam = raw_cam(
        pass.post_acts[tap].data(),
        grads.data(),
        channels,
        th * tw,
    );
    let mut values = bilinear_upsample(&cam, (th, tw), (h, w));
    min_max_normalize(&mut values);
    Ok(SaliencyMap {
        width: w,
        height: h,
        values,
        layer,
        target_class: t,
    })
}

/// Fraction of total saliency mass inside the trigger rectangle dilated by
/// `dilation` pixels on every side. Returns 0 for an all-zero map.
pub fn localization_score<F: Scalar>(
    map: &SaliencyMap<F>,
    region: (usize, usize, usize),
    dilation: usize,
) -> Result<f64> {
    let (rx, ry, size) = region;
    if rx + size > map.width || ry + size > map.height {
        return Err(Error::OutOfBounds(format!(
            "region of size {size} at ({rx}, {ry}) leaves a {}x{} map",
            map.width, map.height
        )));
    }
    let x0 = rx.saturating_sub(dilation);
    let y0 = ry.saturating_sub(dilation);
    let x1 = (rx + size + dilation).min(map.width);
    let y1 = (ry + size + dilation).min(map.height);
    let mut inside = 0.0f64;
    let mut total = 0.0f64;
    for y in 0..map.height {
        for x in 0..map.width {
            let v = map.value(x, y).to64();
            total += v;
            if x >= x0 && x < x1 && y >= y0 && y < y1 {
                inside += v;
            }
        }
    }
    if total == 0.0 {
        return Ok(0.0);
    }
    Ok(inside / total)
}

/// Blue-to-red colormap alpha-blended (0.4) over the grayscale image.
pub fn overlay_rgb<F: Scalar>(image: &Image<F>, map: &SaliencyMap<F>) -> Result<image::RgbImage> {
    if image.width() != map.width || image.height() != map.height {
        return Err(Error::ShapeMismatch(format!(
            "image {}x{} vs map {}x{}",
            image.width(),
            image.height(),
            map.width,
            map.height
        )));
    }
    const ALPHA: f64 = 0.4;
    let mut out = image::RgbImage::new(map.width as u32, map.height as u32);
    for y in 0..map.height {
        for x in 0..map.width {
            let g = image.pixel(x, y).to64();
            let t = map.value(x, y).to64();
            // Heat: blue at 0, red at 1.
            let (r, gb, b) = (t, 0.0, 1.0 - t);
            let px = |c: f64| (((1.0 - ALPHA) * g + ALPHA * c) * 255.0).round() as u8;
            out.put_pixel(x as u32, y as u32, image::Rgb([px(r), px(gb), px(b)]));
        }
    }
    Ok(out)
}

/// Renders the overlay and writes it as a PNG.
pub fn saliency_overlay<F: Scalar>(
    image: &Image<F>,
    map: &SaliencyMap<F>,
    path: &Path,
) -> Result<()> {
    overlay_rgb(image, map)?.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ArchConfig, ConvSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn two_layer_arch(c1: usize, c2: usize, classes: usize) -> ArchConfig {
        let conv = |out_channels| ConvSpec {
            out_channels,
            kernel: 3,
            stride: 1,
            padding: 1,
        };
        ArchConfig {
            conv_layers: vec![conv(c1), conv(c2)],
            num_classes: classes,
            middle_tap: 0,
            final_tap: 1,
        }
    }

    fn random_image(w: usize, h: usize, seed: u64) -> Image<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_vec(w, h, (0..w * h).map(|_| rng.gen::<f64>()).collect()).unwrap()
    }

    #[test]
    fn zero_final_conv_weights_give_zero_map() {
        let arch = two_layer_arch(2, 3, 2);
        let mut model = init_model::<f64>(&arch, 1).unwrap();
        // Zero the final conv layer: its activations vanish, so the final
        // tap map must be identically zero.
        let count = model.param_count();
        let dense_len = 2 * 3 + 2;
        let conv2_len = 3 * 2 * 9 + 3;
        for i in count - dense_len - conv2_len..count - dense_len {
            model.set_param(i, 0.0);
        }
        let img = random_image(8, 8, 2);
        let map = gradcam(&model, &img, 0, TapLayer::Final).unwrap();
        assert!(map.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn identity_network_map_tracks_input_on_2x2() {
        // Both convs pass the single channel through unchanged (center tap
        // of the kernel = 1), so the middle-tap map reduces to the
        // normalized input.
        let arch = two_layer_arch(1, 1, 2);
        let mut model = init_model::<f64>(&arch, 0).unwrap();
        for i in 0..model.param_count() {
            model.set_param(i, 0.0);
        }
        model.set_param(4, 1.0); // conv1 center
        model.set_param(9 + 1 + 4, 1.0); // conv2 center
        // dense: class 0 weight positive.
        let dense_off = model.param_count() - (2 + 2);
        model.set_param(dense_off, 2.0);
        let img = Image::from_vec(2, 2, vec![0.2, 0.4, 0.6, 0.8]).unwrap();
        let map = gradcam(&model, &img, 0, TapLayer::Middle).unwrap();
        // Activations equal the input; channel weight is positive and
        // uniform; min-max of (c * input) is (input - 0.2) / 0.6.
        let expect = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
        for (got, want) in map.values.iter().zip(expect) {
            assert!((got - want).abs() < 1e-12, "got {got}, want {want}");
        }
        // Negative class weight drives the pre-ReLU sum negative: zero map.
        let map1 = gradcam(&model, &img, 1, TapLayer::Middle).unwrap();
        assert!(map1.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gradcam_is_deterministic_and_normalized() {
        let arch = two_layer_arch(3, 4, 3);
        let model = init_model::<f64>(&arch, 9).unwrap();
        let img = random_image(10, 10, 5);
        let a = gradcam(&model, &img, 1, TapLayer::Middle).unwrap();
        let b = gradcam(&model, &img, 1, TapLayer::Middle).unwrap();
        assert_eq!(a, b);
        assert!(a.values.iter().all(|v| *v >= 0.0 && *v <= 1.0));
        assert!(gradcam(&model, &img, 7, TapLayer::Final).is_err());
    }

    #[test]
    fn raw_cam_is_nonnegative() {
        let arch = two_layer_arch(3, 4, 2);
        let model = init_model::<f64>(&arch, 4).unwrap();
        let img = random_image(9, 9, 6);
        let batch = Tensor::from_vec(&[1, 1, 9, 9], img.pixels().to_vec()).unwrap();
        let pass = model.forward(&batch).unwrap();
        for tap in [0usize, 1] {
            let grads = model.logit_gradient_wrt_tap(&pass, 0, tap).unwrap();
            let shape = pass.post_acts[tap].shape();
            let cam = raw_cam(
                pass.post_acts[tap].data(),
                grads.data(),
                shape[1],
                shape[2] * shape[3],
            );
            assert!(cam.iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn tap_gradient_matches_finite_differences() {
        let arch = two_layer_arch(2, 3, 2);
        let model = init_model::<f64>(&arch, 13).unwrap();
        let img = random_image(7, 7, 14);
        let batch = Tensor::from_vec(&[1, 1, 7, 7], img.pixels().to_vec()).unwrap();
        let pass = model.forward(&batch).unwrap();
        let t = 1;
        let tap = 0;
        let analytic = model.logit_gradient_wrt_tap(&pass, t, tap).unwrap();
        let acts = &pass.post_acts[tap];
        let h = 1e-4;
        let mut worst = 0.0f64;
        for i in 0..acts.len() {
            let mut plus = acts.clone();
            plus.data_mut()[i] += h;
            let mut minus = acts.clone();
            minus.data_mut()[i] -= h;
            let lp = model.forward_from_tap(tap, &plus).unwrap().at2(0, t);
            let lm = model.forward_from_tap(tap, &minus).unwrap().at2(0, t);
            let fd = (lp - lm) / (2.0 * h);
            let a = analytic.data()[i];
            let denom = fd.abs().max(a.abs()).max(1e-6);
            worst = worst.max((fd - a).abs() / denom);
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    fn uniform_map(w: usize, h: usize, v: f64) -> SaliencyMap<f64> {
        SaliencyMap {
            width: w,
            height: h,
            values: vec![v; w * h],
            layer: TapLayer::Middle,
            target_class: 0,
        }
    }

    #[test]
    fn localization_uniform_map() {
        let map = uniform_map(16, 16, 1.0);
        let score = localization_score(&map, (6, 6, 3), 0).unwrap();
        assert!((score - 9.0 / 256.0).abs() < 1e-12);
    }

    #[test]
    fn localization_all_mass_inside() {
        let mut map = uniform_map(16, 16, 0.0);
        for y in 6..9 {
            for x in 6..9 {
                map.values[y * 16 + x] = 0.7;
            }
        }
        assert_eq!(localization_score(&map, (6, 6, 3), 0).unwrap(), 1.0);
        assert_eq!(localization_score(&map, (6, 6, 3), 2).unwrap(), 1.0);
    }

    #[test]
    fn localization_zero_map_and_bounds() {
        let map = uniform_map(16, 16, 0.0);
        assert_eq!(localization_score(&map, (6, 6, 3), 2).unwrap(), 0.0);
        assert!(localization_score(&map, (14, 14, 3), 0).is_err());
    }

    #[test]
    fn localization_matches_scalar_loop_and_grows_with_dilation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut map = uniform_map(16, 16, 0.0);
        for v in map.values.iter_mut() {
            *v = rng.gen::<f64>();
        }
        let region = (5, 7, 3);
        let mut last = -1.0;
        for d in 0..6 {
            let got = localization_score(&map, region, d).unwrap();
            // Direct recomputation.
            let (x0, y0) = (region.0.saturating_sub(d), region.1.saturating_sub(d));
            let (x1, y1) = ((region.0 + 3 + d).min(16), (region.1 + 3 + d).min(16));
            let mut inside = 0.0;
            let mut total = 0.0;
            for y in 0..16 {
                for x in 0..16 {
                    let v = map.values[y * 16 + x];
                    total += v;
                    if x >= x0 && x < x1 && y >= y0 && y < y1 {
                        inside += v;
                    }
                }
            }
            assert!((got - inside / total).abs() < 1e-12);
            assert!(got >= last);
            last = got;
        }
    }

    #[test]
    fn overlay_tints_and_preserves_dims() {
        let img = Image::filled(6, 4, 0.5).unwrap();
        let zero = SaliencyMap {
            width: 6,
            height: 4,
            values: vec![0.0; 24],
            layer: TapLayer::Final,
            target_class: 0,
        };
        let rgb = overlay_rgb(&img, &zero).unwrap();
        assert_eq!((rgb.width(), rgb.height()), (6, 4));
        let p = rgb.get_pixel(0, 0);
        assert!(p[2] > p[0], "zero map should tint blue, got {p:?}");

        let mut hot = zero.clone();
        hot.values[2 * 6 + 3] = 1.0;
        let rgb = overlay_rgb(&img, &hot).unwrap();
        let p = rgb.get_pixel(3, 2);
        assert!(p[0] > p[2], "hotspot should be red, got {p:?}");

        let bad = uniform_map(5, 5, 0.0);
        assert!(overlay_rgb(&img, &bad).is_err());
    }

    #[test]
    fn overlay_writes_png() {
        let dir = tempfile::tempdir().unwrap();
        let img = random_image(8, 8, 1);
        let map = uniform_map(8, 8, 0.5);
        let path = dir.path().join("probe_final_3.png");
        saliency_overlay(&img, &map, &path).unwrap();
        let loaded = image::open(&path).unwrap();
        assert_eq!((loaded.width(), loaded.height()), (8, 8));
    }

    #[test]
    fn bilinear_upsample_identity_and_corners() {
        let src = vec![0.0, 1.0, 2.0, 3.0];
        assert_eq!(bilinear_upsample::<f64>(&src, (2, 2), (2, 2)), src);
        let up = bilinear_upsample::<f64>(&src, (2, 2), (4, 4));
        assert_eq!(up.len(), 16);
        assert_eq!(up[0], 0.0);
        assert_eq!(up[3], 1.0);
        assert_eq!(up[12], 2.0);
        assert_eq!(up[15], 3.0);
        // Interior point (1,1) sits a third of the way along both axes:
        // 4/9*0 + 2/9*1 + 2/9*2 + 1/9*3 = 1.
        assert!((up[5] - 1.0).abs() < 1e-12);
    }
}
