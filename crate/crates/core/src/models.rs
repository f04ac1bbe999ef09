//! Synthesis, registration and reconstruction networks.
//!
//! Every network owns a [`ParamSet`] and builds its forward pass onto a
//! caller-supplied [`Graph`], so callers decide the mode (training or
//! inference) and which sets receive gradients. Tensors are `[N, C, H, W]`
//! with complex data stored as two channels (real, imaginary).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{kaiming_uniform, Graph, Mode, ParamSet, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::fourier::ComplexRaster;
use crate::geometry::RigidParams;

/// Encoder-decoder shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    /// number of 2× downsampling steps
    pub depth: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl UNetConfig {
    pub fn new(depth: usize, base_channels: usize, in_channels: usize, out_channels: usize) -> Self {
        Self {
            depth,
            base_channels,
            in_channels,
            out_channels,
        }
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn check_extent(&self, h: usize, w: usize) -> Result<()> {
        let m = 1usize << self.depth;
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(Error::invalid(format!(
                "extents {h}x{w} are not divisible by 2^{} = {m}",
                self.depth
            )));
        }
        Ok(())
    }
}

fn conv_layer<T: Real>(
    set: &mut ParamSet<T>,
    rng: &mut ChaCha8Rng,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
) {
    set.push(
        format!("{name}.weight"),
        kaiming_uniform(vec![cout, cin, k, k], cin * k * k, rng),
    );
    set.push(format!("{name}.bias"), Tensor::zeros(vec![cout]));
}

fn bn_layer<T: Real>(set: &mut ParamSet<T>, name: &str, c: usize) {
    set.push(format!("{name}.gamma"), Tensor::full(vec![c], T::one()));
    set.push(format!("{name}.beta"), Tensor::zeros(vec![c]));
    set.push(format!("{name}.running_mean"), Tensor::zeros(vec![c]));
    set.push(format!("{name}.running_var"), Tensor::full(vec![c], T::one()));
}

fn conv<T: Real>(g: &mut Graph<T>, set: &ParamSet<T>, name: &str, x: Var) -> Result<Var> {
    let w = g.param_by_name(set, &format!("{name}.weight"))?;
    let b = g.param_by_name(set, &format!("{name}.bias"))?;
    g.conv2d(x, w, b)
}

fn conv_bn_relu<T: Real>(g: &mut Graph<T>, set: &ParamSet<T>, name: &str, x: Var) -> Result<Var> {
    let y = conv(g, set, &format!("{name}.conv"), x)?;
    let y = g.batch_norm(y, set, &format!("{name}.bn"))?;
    Ok(g.relu(y))
}

/// U-Net: per level two conv-norm-relu blocks, max-pool down, nearest
/// upsampling followed by a conv on the way up, skip concatenation, and a
/// final 1×1 conv.
#[derive(Clone, Debug, PartialEq)]
pub struct UNet<T: Real = f32> {
    pub config: UNetConfig,
    pub params: ParamSet<T>,
}

impl<T: Real> UNet<T> {
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self> {
        if config.depth == 0 || config.base_channels == 0 || config.in_channels == 0 || config.out_channels == 0
        {
            return Err(Error::invalid(format!("degenerate network config {config:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = ParamSet::new();
        let mut cin = config.in_channels;
        let block = |set: &mut ParamSet<T>, rng: &mut ChaCha8Rng, name: String, cin: usize, cout: usize| {
            for j in 0..2 {
                let n = format!("{name}.{j}");
                conv_layer(set, rng, &format!("{n}.conv"), if j == 0 { cin } else { cout }, cout, 3);
                bn_layer(set, &format!("{n}.bn"), cout);
            }
        };
        for l in 0..config.depth {
            block(&mut set, &mut rng, format!("enc{l}"), cin, config.channels(l));
            cin = config.channels(l);
        }
        block(&mut set, &mut rng, "mid".into(), cin, config.channels(config.depth));
        for l in (0..config.depth).rev() {
            let c = config.channels(l);
            conv_layer(&mut set, &mut rng, &format!("up{l}.conv"), config.channels(l + 1), c, 3);
            block(&mut set, &mut rng, format!("dec{l}"), 2 * c, c);
        }
        conv_layer(&mut set, &mut rng, "out", config.channels(0), config.out_channels, 1);
        Ok(Self { config, params: set })
    }

    /// Zero the final 1×1 conv so the network outputs exactly zero.
    pub fn zero_output_layer(&mut self) {
        for name in ["out.weight", "out.bias"] {
            let i = self.params.index_of(name).expect("output layer");
            self.params.value_mut(i).data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let (_, c, h, w) = g.value(x).nchw()?;
        crate::error::ensure_eq("network input channels", self.config.in_channels, c)?;
        self.config.check_extent(h, w)?;
        let set = &self.params;
        let block = |g: &mut Graph<T>, name: &str, x: Var| -> Result<Var> {
            let y = conv_bn_relu(g, set, &format!("{name}.0"), x)?;
            conv_bn_relu(g, set, &format!("{name}.1"), y)
        };
        let mut skips = Vec::with_capacity(self.config.depth);
        let mut y = x;
        for l in 0..self.config.depth {
            y = block(g, &format!("enc{l}"), y)?;
            skips.push(y);
            y = g.maxpool2(y)?;
        }
        y = block(g, "mid", y)?;
        for l in (0..self.config.depth).rev() {
            y = g.upsample2(y)?;
            y = conv(g, set, &format!("up{l}.conv"), y)?;
            y = g.relu(y);
            y = g.concat_channels(skips[l], y)?;
            y = block(g, &format!("dec{l}"), y)?;
        }
        conv(g, set, "out", y)
    }
}

/// Evaluate `f` on a fresh inference-mode graph holding `inputs`, returning
/// the value of the node it produces.
pub fn infer<T: Real>(
    inputs: &[&Tensor<T>],
    f: impl FnOnce(&mut Graph<T>, &[Var]) -> Result<Var>,
) -> Result<Tensor<T>> {
    let mut g = Graph::new(Mode::Eval);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input((*t).clone())).collect();
    let out = f(&mut g, &vars)?;
    Ok(g.value(out).clone())
}

/// Cross-contrast synthesis: complex reference in, complex target estimate
/// out, in either domain.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthNet<T: Real = f32> {
    pub unet: UNet<T>,
}

impl<T: Real> SynthNet<T> {
    pub fn new(depth: usize, base_channels: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            unet: UNet::new(UNetConfig::new(depth, base_channels, 2, 2), seed)?,
        })
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.unet.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.unet.params
    }

    /// Inference on a single raster of either domain.
    pub fn apply<R: ComplexRaster<T>>(&self, src: &R) -> Result<R> {
        let out = infer(&[&src.to_tensor()], |g, v| synth_forward(g, self, v[0]))?;
        R::from_tensor(&out, 0)
    }
}

pub fn synth_forward<T: Real>(g: &mut Graph<T>, net: &SynthNet<T>, src: Var) -> Result<Var> {
    net.unet.forward(g, src)
}

/// Localisation-network feature maps.
pub const REG_FEATURES: [usize; 4] = [16, 32, 16, 8];
pub const REG_HIDDEN: usize = 32;
/// Output units: pixels, pixels, half-radians. The image loss is much flatter
/// in rotation than in translation; a coarse rotation unit keeps the
/// rotation gradient reaching the shared layers from being swamped.
const REG_OUTPUT_SCALE: [f64; 3] = [1.0, 1.0, 0.5];

/// Rigid registration: localisation net on the concatenated (moving, fixed)
/// pair regressing `(tx, ty, theta)`, followed by a bilinear warp.
#[derive(Clone, Debug, PartialEq)]
pub struct RegNet<T: Real = f32> {
    pub size: usize,
    pub params: ParamSet<T>,
}

impl<T: Real> RegNet<T> {
    pub fn new(size: usize, seed: u64) -> Result<Self> {
        let m = 1 << REG_FEATURES.len();
        if size < m || size % m != 0 {
            return Err(Error::invalid(format!(
                "registration needs extents divisible by {m} for its pooling stages, got {size}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = ParamSet::new();
        let mut cin = 4;
        for (i, &c) in REG_FEATURES.iter().enumerate() {
            conv_layer(&mut set, &mut rng, &format!("loc{i}.conv"), cin, c, 3);
            bn_layer(&mut set, &format!("loc{i}.bn"), c);
            cin = c;
        }
        let flat = Self::flat_size(size);
        set.push("fc1.weight", kaiming_uniform(vec![REG_HIDDEN, flat], flat, &mut rng));
        set.push("fc1.bias", Tensor::zeros(vec![REG_HIDDEN]));
        // start from the identity transform
        set.push("fc2.weight", Tensor::zeros(vec![3, REG_HIDDEN]));
        set.push("fc2.bias", Tensor::zeros(vec![3]));
        Ok(Self { size, params: set })
    }

    pub fn flat_size(size: usize) -> usize {
        let s = size >> REG_FEATURES.len();
        s * s * REG_FEATURES[REG_FEATURES.len() - 1]
    }

    /// `[N, 3]` rigid parameters for a `[N, 2, H, W]` moving/fixed pair.
    pub fn localise(&self, g: &mut Graph<T>, moving: Var, fixed: Var) -> Result<Var> {
        let (_, _, h, w) = g.value(moving).nchw()?;
        if h != self.size || w != self.size {
            return Err(Error::invalid(format!(
                "registration net built for {0}x{0}, got {h}x{w}",
                self.size
            )));
        }
        let set = &self.params;
        let mut y = g.concat_channels(moving, fixed)?;
        for i in 0..REG_FEATURES.len() {
            y = conv_bn_relu(g, set, &format!("loc{i}"), y)?;
            y = g.maxpool2(y)?;
        }
        let (w1, b1) = (g.param_by_name(set, "fc1.weight")?, g.param_by_name(set, "fc1.bias")?);
        y = g.linear(y, w1, b1)?;
        y = g.relu(y);
        let (w2, b2) = (g.param_by_name(set, "fc2.weight")?, g.param_by_name(set, "fc2.bias")?);
        y = g.linear(y, w2, b2)?;
        g.scale_cols(y, &REG_OUTPUT_SCALE.map(T::real))
    }

    /// Registered image-domain estimate for one pair.
    pub fn apply(
        &self,
        moving: &crate::fourier::ComplexImage<T>,
        fixed: &crate::fourier::ComplexImage<T>,
    ) -> Result<(RigidParams, crate::fourier::ComplexImage<T>)> {
        let mut g = Graph::new(Mode::Eval);
        let (m, f) = (g.input(moving.to_tensor()), g.input(fixed.to_tensor()));
        let (p, warped) = reg_forward(&mut g, self, m, f)?;
        Ok((
            RigidParams::from_slice(g.value(p).data()),
            crate::fourier::ComplexImage::from_tensor(g.value(warped), 0)?,
        ))
    }
}

/// Image-domain registration: returns `(params [N, 3], warped moving)`.
pub fn reg_forward<T: Real>(g: &mut Graph<T>, net: &RegNet<T>, moving: Var, fixed: Var) -> Result<(Var, Var)> {
    let p = net.localise(g, moving, fixed)?;
    let warped = g.warp(moving, p)?;
    Ok((p, warped))
}

/// K-space registration through the image domain:
/// `F(warp(F⁻¹ y_moving; net(F⁻¹ y_moving, F⁻¹ y_fixed)))`.
pub fn reg_forward_kspace<T: Real>(
    g: &mut Graph<T>,
    net: &RegNet<T>,
    y_moving: Var,
    y_fixed: Var,
) -> Result<(Var, Var)> {
    let moving = g.ifft2c(y_moving)?;
    let fixed = g.ifft2c(y_fixed)?;
    let (p, warped) = reg_forward(g, net, moving, fixed)?;
    Ok((p, g.fft2c(warped)?))
}

/// Registration networks for the two branches. `Shared` binds both
/// branches to one parameter set, so an update through either is visible to
/// the other and gradients from both branches sum.
#[derive(Clone, Debug, PartialEq)]
pub enum RegBinding<T: Real = f32> {
    Shared(RegNet<T>),
    Independent { image: RegNet<T>, kspace: RegNet<T> },
}

impl<T: Real> RegBinding<T> {
    pub fn shared(size: usize, seed: u64) -> Result<Self> {
        Ok(Self::Shared(RegNet::new(size, seed)?))
    }

    /// Two copies starting from identical weights.
    pub fn independent(size: usize, seed: u64) -> Result<Self> {
        let net = RegNet::new(size, seed)?;
        Ok(Self::Independent {
            image: net.clone(),
            kspace: net,
        })
    }

    pub fn image(&self) -> &RegNet<T> {
        match self {
            Self::Shared(n) => n,
            Self::Independent { image, .. } => image,
        }
    }

    pub fn kspace(&self) -> &RegNet<T> {
        match self {
            Self::Shared(n) => n,
            Self::Independent { kspace, .. } => kspace,
        }
    }

    pub fn image_mut(&mut self) -> &mut RegNet<T> {
        match self {
            Self::Shared(n) => n,
            Self::Independent { image, .. } => image,
        }
    }

    pub fn kspace_mut(&mut self) -> &mut RegNet<T> {
        match self {
            Self::Shared(n) => n,
            Self::Independent { kspace, .. } => kspace,
        }
    }

    pub fn is_shared(&self) -> bool {
        matches!(self, Self::Shared(_))
    }

    /// Distinct parameter sets (one when shared).
    pub fn sets(&self) -> Vec<&ParamSet<T>> {
        match self {
            Self::Shared(n) => vec![&n.params],
            Self::Independent { image, kspace } => vec![&image.params, &kspace.params],
        }
    }

    pub fn sets_mut(&mut self) -> Vec<&mut ParamSet<T>> {
        match self {
            Self::Shared(n) => vec![&mut n.params],
            Self::Independent { image, kspace } => vec![&mut image.params, &mut kspace.params],
        }
    }
}

/// Bind image and k-space registration to one parameter set.
pub fn shared_registration_binding<T: Real>(net: RegNet<T>) -> RegBinding<T> {
    RegBinding::Shared(net)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Image,
    Kspace,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconNetConfig {
    pub depth: usize,
    pub base_channels: usize,
    /// 4 input channels (prior estimate + under-sampled target) when set,
    /// otherwise 2 (under-sampled target only)
    pub multi_contrast: bool,
    pub dc_enabled: bool,
}

/// Reconstruction: the network predicts a residual on top of the
/// under-sampled input, then data consistency replaces the sampled rows.
#[derive(Clone, Debug, PartialEq)]
pub struct ReconNet<T: Real = f32> {
    pub config: ReconNetConfig,
    pub branch: Branch,
    pub unet: UNet<T>,
}

impl<T: Real> ReconNet<T> {
    pub fn new(config: ReconNetConfig, branch: Branch, seed: u64) -> Result<Self> {
        let cin = if config.multi_contrast { 4 } else { 2 };
        Ok(Self {
            config,
            branch,
            unet: UNet::new(UNetConfig::new(config.depth, config.base_channels, cin, 2), seed)?,
        })
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.unet.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.unet.params
    }
}

/// Reconstruct one branch.
///
/// * `prior`: aligned reference-derived estimate in the branch's domain
///   (required exactly when the net is multi-contrast).
/// * `y_u`: measured under-sampled k-space.
/// * `x_u`: zero-filled image, `F⁻¹ y_u`.
/// * `rows`: sampled k-space rows.
///
/// Returns the estimate in the branch's own domain.
pub fn recon_forward<T: Real>(
    g: &mut Graph<T>,
    net: &ReconNet<T>,
    prior: Option<Var>,
    y_u: Var,
    x_u: Var,
    rows: &[bool],
) -> Result<Var> {
    let under = match net.branch {
        Branch::Image => x_u,
        Branch::Kspace => y_u,
    };
    let input = match (net.config.multi_contrast, prior) {
        (true, Some(p)) => g.concat_channels(p, under)?,
        (false, None) => under,
        (true, None) => {
            return Err(Error::invalid(
                "multi-contrast reconstruction needs a prior estimate (4 input channels)",
            ))
        }
        (false, Some(_)) => {
            return Err(Error::invalid(
                "single-contrast reconstruction takes 2 input channels, got a 4-channel input",
            ))
        }
    };
    let residual = net.unet.forward(g, input)?;
    let out = g.add(under, residual)?;
    if !net.config.dc_enabled {
        return Ok(out);
    }
    match net.branch {
        Branch::Image => {
            let k = g.fft2c(out)?;
            let k = g.data_consistency(k, y_u, rows)?;
            g.ifft2c(k)
        }
        Branch::Kspace => g.data_consistency(out, y_u, rows),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acquisition::make_mask;
    use crate::diffcore::{apply_bn_observations, grad_check, BN_MOMENTUM};
    use crate::fourier::{fft2c, ComplexImage, KSpaceGrid};
    use crate::geometry::apply_rigid;
    use rand::Rng;

    fn random_image(size: usize, seed: u64) -> ComplexImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = size * size;
        ComplexImage::from_parts(
            size,
            size,
            (0..n).map(|_| rng.gen_range(0.0..1.0)).collect(),
            (0..n).map(|_| rng.gen_range(-0.1..0.1)).collect(),
        )
        .unwrap()
    }

    fn smooth_image(size: usize) -> ComplexImage {
        let c = size as f32 / 2.0;
        let real = (0..size * size)
            .map(|i| {
                let (y, x) = ((i / size) as f32, (i % size) as f32);
                let r2 = ((x - c - 3.0) / 9.0).powi(2) + ((y - c) / 14.0).powi(2);
                if r2 < 1.0 { 1.0 - 0.5 * r2 } else { 0.0 }
            })
            .collect();
        ComplexImage::from_real(size, size, real).unwrap()
    }

    #[test]
    fn synthesis_preserves_shape() {
        let net = SynthNet::<f32>::new(3, 4, 1).unwrap();
        let out = net.apply(&random_image(64, 2)).unwrap();
        assert_eq!((out.height, out.width), (64, 64));
        let k = net.apply(&fft2c(&random_image(64, 3))).unwrap();
        assert_eq!((k.height, k.width), (64, 64));
    }

    #[test]
    fn synthesis_rejects_indivisible_extent() {
        let net = SynthNet::<f32>::new(3, 4, 1).unwrap();
        let err = net.apply(&random_image(36, 2)).unwrap_err();
        assert!(err.to_string().contains("divisible"), "{err}");
    }

    #[test]
    fn zeroed_output_layer_gives_zero() {
        let mut net = SynthNet::<f32>::new(3, 4, 1).unwrap();
        net.unet.zero_output_layer();
        let out = net.apply(&random_image(32, 2)).unwrap();
        assert!(out.real.iter().chain(&out.imag).all(|&v| v == 0.0));
    }

    #[test]
    fn registration_flat_size() {
        assert_eq!(RegNet::<f32>::flat_size(64), 4 * 4 * 8);
        let net = RegNet::<f32>::new(64, 0).unwrap();
        assert_eq!(net.params.get("fc1.weight").unwrap().shape(), &[32, 128]);
        assert_eq!(net.params.get("fc2.weight").unwrap().shape(), &[3, 32]);
        assert!(RegNet::<f32>::new(8, 0).is_err());
        assert!(RegNet::<f32>::new(40, 0).is_err());
    }

    #[test]
    fn fresh_registration_is_identity() {
        let net = RegNet::<f32>::new(64, 5).unwrap();
        let moving = random_image(64, 1);
        let (p, warped) = net.apply(&moving, &random_image(64, 2)).unwrap();
        assert_eq!(p, RigidParams::IDENTITY);
        assert_eq!(warped, moving);
    }

    #[test]
    fn kspace_registration_round_trips_through_image_domain() {
        let mut net = RegNet::<f64>::new(32, 5).unwrap();
        // non-trivial transform; the rotation output is in half-radians
        let i = net.params.index_of("fc2.bias").unwrap();
        net.params.value_mut(i).data_mut().copy_from_slice(&[1.5, -0.7, 2.0 * 4f64.to_radians()]);
        let moving: ComplexImage<f64> = smooth_image(32).cast();
        let fixed: ComplexImage<f64> = random_image(32, 4).cast();
        let (ym, yf) = (fft2c(&moving), fft2c(&fixed));

        let mut g = Graph::new(Mode::Eval);
        let (a, b) = (g.input(ym.to_tensor()), g.input(yf.to_tensor()));
        let (p, yk) = reg_forward_kspace(&mut g, &net, a, b).unwrap();
        let p = RigidParams::from_slice(g.value(p).data());
        let yk = KSpaceGrid::from_tensor(g.value(yk), 0).unwrap();

        let (p_img, warped) = net.apply(&moving, &fixed).unwrap();
        assert!((p.theta - 4f64.to_radians()).abs() < 1e-12);
        assert!((p.tx - p_img.tx).abs() < 1e-9 && (p.theta - p_img.theta).abs() < 1e-9);
        let expected = fft2c(&warped);
        assert!(yk.max_abs_diff(&expected) < 1e-9);
        let direct = fft2c(&apply_rigid(&moving, &p_img).unwrap());
        assert!(yk.max_abs_diff(&direct) < 1e-9);
    }

    fn recon_setup(size: usize, accel: u32) -> (ComplexImage, KSpaceGrid, ComplexImage, Vec<bool>) {
        let x = random_image(size, 9);
        let y = fft2c(&x);
        let mask = make_mask(size, accel, 6.min(size), 0.25, 1).unwrap();
        let y_u = crate::acquisition::undersample(&y, &mask).unwrap();
        let x_u = crate::acquisition::zero_filled(&y_u);
        (x, y_u, x_u, mask.sampled)
    }

    fn recon_cfg(multi: bool) -> ReconNetConfig {
        ReconNetConfig {
            depth: 2,
            base_channels: 4,
            multi_contrast: multi,
            dc_enabled: true,
        }
    }

    fn run_recon(net: &ReconNet, prior: Option<&Tensor>, y_u: &KSpaceGrid, x_u: &ComplexImage, rows: &[bool]) -> Result<Tensor> {
        let mut g = Graph::new(Mode::Eval);
        let p = prior.map(|t| g.input(t.clone()));
        let (yv, xv) = (g.input(y_u.to_tensor()), g.input(x_u.to_tensor()));
        let out = recon_forward(&mut g, net, p, yv, xv, rows)?;
        Ok(g.value(out).clone())
    }

    #[test]
    fn full_mask_reconstruction_is_exact() {
        let (x, y_u, x_u, _) = recon_setup(32, 1);
        let rows = vec![true; 32];
        let prior = random_image(32, 77).to_tensor();
        for (branch, seed) in [(Branch::Image, 1), (Branch::Kspace, 2)] {
            let net = ReconNet::new(recon_cfg(true), branch, seed).unwrap();
            let out = run_recon(&net, Some(&prior), &y_u, &x_u, &rows).unwrap();
            let truth = match branch {
                Branch::Image => x.to_tensor(),
                Branch::Kspace => fft2c(&x).to_tensor(),
            };
            assert!(out.max_abs_diff(&truth) < 1e-6, "{branch:?}");
        }
    }

    #[test]
    fn reconstruction_keeps_sampled_rows() {
        for seed in 0..3 {
            let (_, y_u, x_u, rows) = recon_setup(32, 4);
            let prior = random_image(32, 100 + seed).to_tensor();
            for branch in [Branch::Image, Branch::Kspace] {
                let net = ReconNet::new(recon_cfg(true), branch, seed).unwrap();
                let out = run_recon(&net, Some(&prior), &y_u, &x_u, &rows).unwrap();
                let k = match branch {
                    Branch::Image => fft2c(&ComplexImage::from_tensor(&out, 0).unwrap()),
                    Branch::Kspace => KSpaceGrid::from_tensor(&out, 0).unwrap(),
                };
                for (r, _) in rows.iter().enumerate().filter(|(_, &s)| s) {
                    for c in 0..32 {
                        let i = r * 32 + c;
                        assert!((k.real[i] - y_u.real[i]).abs() < 1e-6);
                        assert!((k.imag[i] - y_u.imag[i]).abs() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn reconstruction_mode_contract() {
        let (_, y_u, x_u, rows) = recon_setup(32, 4);
        let prior = random_image(32, 1).to_tensor();
        let single = ReconNet::new(recon_cfg(false), Branch::Image, 0).unwrap();
        assert!(run_recon(&single, None, &y_u, &x_u, &rows).is_ok());
        let err = run_recon(&single, Some(&prior), &y_u, &x_u, &rows).unwrap_err();
        assert!(err.to_string().contains("single-contrast"), "{err}");
        let multi = ReconNet::new(recon_cfg(true), Branch::Image, 0).unwrap();
        assert!(run_recon(&multi, None, &y_u, &x_u, &rows).is_err());
    }

    #[test]
    fn forward_passes_are_deterministic() {
        let net = SynthNet::<f32>::new(2, 4, 3).unwrap();
        let x = random_image(16, 0);
        assert_eq!(net.apply(&x).unwrap(), net.apply(&x).unwrap());
        assert_eq!(SynthNet::<f32>::new(2, 4, 3).unwrap(), net);
    }

    #[test]
    fn shared_binding_reads_and_accumulates_as_one() {
        let mut binding = shared_registration_binding(RegNet::<f64>::new(16, 1).unwrap());
        let i = binding.image().params.index_of("fc2.bias").unwrap();
        binding.image_mut().params.value_mut(i).data_mut()[0] = 0.25;
        assert_eq!(binding.kspace().params.value(i).data()[0], 0.25);
        assert_eq!(binding.sets().len(), 1);

        let moving = smooth_image(16).cast::<f64>();
        let fixed = apply_rigid(&moving, &RigidParams::new(1.0, 0.5, 0.1)).unwrap();
        let grads_for = |image: bool, kspace: bool| {
            let mut g = Graph::<f64>::new(Mode::Train);
            let (m, f) = (g.input(moving.to_tensor()), g.input(fixed.to_tensor()));
            let mut loss = None;
            if image {
                let (_, w) = reg_forward(&mut g, binding.image(), m, f).unwrap();
                loss = Some(g.mse(w, f).unwrap());
            }
            if kspace {
                let (ym, yf) = (g.fft2c(m).unwrap(), g.fft2c(f).unwrap());
                let (_, w) = reg_forward_kspace(&mut g, binding.kspace(), ym, yf).unwrap();
                let l = g.mse(w, yf).unwrap();
                loss = Some(match loss {
                    Some(a) => g.add(a, l).unwrap(),
                    None => l,
                });
            }
            let grads = g.backward(loss.unwrap()).unwrap();
            g.param_grads(&grads, &binding.image().params)[i].clone().unwrap()
        };
        let (a, b, both) = (grads_for(true, false), grads_for(false, true), grads_for(true, true));
        for j in 0..3 {
            let sum = a.data()[j] + b.data()[j];
            assert!((both.data()[j] - sum).abs() < 1e-12 * (1.0 + sum.abs()));
        }
    }

    #[test]
    fn batch_norm_running_stats_follow_momentum() {
        let mut net = UNet::<f64>::new(UNetConfig::new(1, 2, 2, 2), 0).unwrap();
        let x = random_image(8, 1).cast::<f64>().to_tensor();
        let mut g = Graph::new(Mode::Train);
        let v = g.input(x);
        net.forward(&mut g, v).unwrap();
        let obs = g.take_bn_observations();
        assert_eq!(obs.len(), 6);
        let mi = net.params.index_of("enc0.0.bn.running_mean").unwrap();
        let batch_mean = obs.iter().find(|o| o.mean_index == mi).unwrap().mean.clone();
        apply_bn_observations(&mut net.params, &obs, BN_MOMENTUM);
        for (r, b) in net.params.value(mi).data().iter().zip(&batch_mean) {
            assert!((r - 0.1 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn small_networks_pass_grad_check() {
        let unet = UNet::<f64>::new(UNetConfig::new(1, 2, 2, 2), 4).unwrap();
        let x = random_image(4, 3).cast::<f64>().to_tensor();
        let x = Tensor::stack(&[x.clone(), x.map(|v| v * 0.5 + 0.1)]).unwrap();
        let target = random_image(4, 8).cast::<f64>().to_tensor();
        let target = Tensor::stack(&[target.clone(), target.clone()]).unwrap();
        let err = grad_check(
            |g, x| {
                let y = unet.forward(g, x)?;
                let t = g.input(target.clone());
                g.mse(y, t)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "unet input gradient: {err}");
    }
}
