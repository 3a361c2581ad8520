//! Subcommand implementations.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use tempres_core::io::{self, header_path, FieldLabel, IDX3_MAGIC};
use tempres_core::model::{
    edge_max_diff, point_mass_max_diff_approx, point_mass_max_diff_exact, sample_edges, EdgeGrid, EdgeSampleSpec,
};
use tempres_core::registration::StepSchedule;
use tempres_core::viz::{render_heatmap, render_overlay_svg};
use tempres_core::{
    build_overlay, groupwise_register, resolution_measure, ImageGrid, ImageStack, OverlayOptions,
    RegistrationConfig, RegistrationResult, ResolutionConfig, ResolutionField, SliceSpec,
};

use crate::cli::{ModelCheckArgs, RegisterArgs, ResolveArgs, Synth3dArgs, VisualizeArgs};
use crate::config::{ConfigFile, Params};
use crate::error::{usage, CliError, Result};
use crate::manifest::RunManifest;
use crate::phantom::synth_stack;

/// What a subcommand prints, plus the number of capped pixels if it computed
/// a resolution field.
#[derive(Clone, Debug, Default)]
pub struct Report {
    pub text: String,
    pub capped: usize,
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn required_path(p: &mut Params, key: &str, flag: Option<PathBuf>) -> Result<PathBuf> {
    let v = p.optional(key, flag.map(|x| x.display().to_string()))?;
    match v {
        Some(s) => Ok(PathBuf::from(s)),
        None => usage(format!("{} needs --{key}", p.subcommand())),
    }
}

fn existing(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        usage(format!("input {} does not exist", path.display()))
    }
}

/// Field payloads (`*.raw` with a `.hdr` sidecar) in a directory, sorted by name.
pub fn field_files_in(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CliError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "raw") && header_path(p).is_file())
        .collect();
    files.sort();
    Ok(files)
}

fn is_idx3(path: &Path) -> Result<bool> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(bytes.len() >= 4 && u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) == IDX3_MAGIC)
}

fn load_fields(files: &[PathBuf], manifest: &mut RunManifest) -> Result<Vec<ImageGrid>> {
    files
        .iter()
        .map(|f| {
            manifest.add_input(f)?;
            manifest.add_input(&header_path(f))?;
            Ok(io::load_field(f)?.grid)
        })
        .collect()
}

fn slice_for(shape: &[usize], raw: Option<String>, p: &mut Params) -> Result<Option<SliceSpec>> {
    if shape.len() < 3 {
        if raw.is_some() {
            p.record("slice", &"none");
        }
        return Ok(None);
    }
    let spec = match raw {
        Some(s) => s.parse::<SliceSpec>()?,
        None => SliceSpec { axis: 0, index: shape[0] / 2 },
    };
    if spec.axis > 2 || spec.index >= shape[spec.axis] {
        return usage(format!("slice {}:{} is outside shape {shape:?}", spec.axis, spec.index));
    }
    p.record("slice", &format!("{}:{}", spec.axis, spec.index));
    Ok(Some(spec))
}

fn write_resolution(dir: &Path, field: &ResolutionField, slice: Option<SliceSpec>) -> Result<()> {
    io::save_field(&dir.join("sigma_star.raw"), &field.sigma_star, FieldLabel::SigmaStar)?;
    write_file(&dir.join("sigma_star.png"), render_heatmap(&field.sigma_star, slice)?)
}

pub fn summarize(field: &ResolutionField) -> String {
    format!(
        "pixels = {}\nmax_sigma_star = {}\nmean_positive_sigma_star = {}\ncapped_pixels = {}\nbandwidths_evaluated = {}\n",
        field.sigma_star.len(),
        field.max(),
        field.mean_positive(),
        field.capped_pixels,
        field.iterations_used
    )
}

pub struct RegisterOutcome {
    pub result: RegistrationResult,
    pub report: Report,
}

/// Images selected by the register inputs, with their hashes recorded.
fn register_inputs(p: &mut Params, args: &RegisterArgs, manifest: &mut RunManifest) -> Result<ImageStack> {
    let inputs: Vec<PathBuf> = p
        .list::<String>("input", args.input.iter().map(|x| x.display().to_string()).collect())?
        .into_iter()
        .map(PathBuf::from)
        .collect();
    let labels = p.optional("labels", args.labels.as_ref().map(|x| x.display().to_string()))?;
    let digit: Option<u8> = p.optional("digit", args.digit)?;
    let limit = p.value("limit", args.limit, 100usize)?;
    if inputs.is_empty() {
        return usage("register needs at least one --input");
    }
    if limit == 0 {
        return usage("--limit must be >= 1");
    }
    match (&labels, digit) {
        (None, Some(_)) => return usage("--digit requires --labels"),
        (Some(_), None) => return usage("--labels is only used together with --digit"),
        _ => {}
    }
    if digit.is_some_and(|d| d > 9) {
        return usage("--digit must be 0-9");
    }
    for i in &inputs {
        existing(i)?;
    }

    if let (Some(labels), Some(digit)) = (labels, digit) {
        let labels = PathBuf::from(labels);
        existing(&labels)?;
        if inputs.len() != 1 || !inputs[0].is_file() || !is_idx3(&inputs[0])? {
            return usage("--digit needs exactly one IDX3 image file as --input");
        }
        manifest.add_input(&inputs[0])?;
        manifest.add_input(&labels)?;
        return Ok(io::load_idx_digit(&inputs[0], &labels, digit, limit)?);
    }

    let mut images = Vec::new();
    for input in &inputs {
        if images.len() >= limit {
            break;
        }
        if input.is_dir() {
            let files = field_files_in(input)?;
            if files.is_empty() {
                return usage(format!("no field files in {}", input.display()));
            }
            let take = (limit - images.len()).min(files.len());
            images.extend(load_fields(&files[..take], manifest)?);
        } else if is_idx3(input)? {
            manifest.add_input(input)?;
            images.extend(io::load_idx_images(input, Some(limit - images.len()))?.into_images());
        } else if header_path(input).is_file() {
            images.extend(load_fields(std::slice::from_ref(input), manifest)?);
        } else {
            return Err(CliError::Format(format!(
                "{} is neither an IDX3 file nor a field file",
                input.display()
            )));
        }
    }
    Ok(ImageStack::new(images)?)
}

pub fn cmd_register(args: &RegisterArgs, config: &ConfigFile) -> Result<RegisterOutcome> {
    let mut p = Params::new("register", config);
    let mut manifest = RunManifest::new("register", Vec::new());
    let stack = register_inputs(&mut p, args, &mut manifest)?;
    let defaults = RegistrationConfig::default();
    let cfg = RegistrationConfig {
        transform_kind: p.value("transform", args.transform, defaults.transform_kind)?,
        norm: p.value("norm", args.norm, defaults.norm)?,
        lambda: p.value("lambda", args.lambda, defaults.lambda)?,
        outer_iterations: p.value("iters", args.iters, defaults.outer_iterations)?,
        inner_steps: p.value("inner-steps", args.inner_steps, defaults.inner_steps)?,
        pyramid_levels: p.value("pyramid-levels", args.pyramid_levels, defaults.pyramid_levels)?,
        tolerance: p.value("tolerance", args.tolerance, defaults.tolerance)?,
        fit_intensity_scale: p.switch("fit-intensity-scale", args.fit_intensity_scale)?,
        seed: p.value("seed", args.seed, defaults.seed)?,
        step_size_schedule: StepSchedule::default(),
        fd_step: defaults.fd_step,
    };
    let out = required_path(&mut p, "out", args.out.clone())?;
    cfg.validate()?;
    log::info!("registering {} image(s) of shape {:?}", stack.len(), stack.shape());
    let result = groupwise_register(&stack, &cfg)?;

    create_dir(&out)?;
    let reg_dir = out.join("registered");
    create_dir(&reg_dir)?;
    for stale in field_files_in(&reg_dir)? {
        for f in [header_path(&stale), stale] {
            fs::remove_file(&f).map_err(|e| CliError::io(&f, e))?;
        }
    }
    io::save_field(&out.join("template.raw"), &result.template, FieldLabel::Template)?;
    if result.template.dim() <= 2 {
        io::save_pgm(&result.template, &out.join("template.pgm"))?;
    }
    for (i, im) in result.registered.iter().enumerate() {
        io::save_field(&reg_dir.join(format!("img_{i:04}.raw")), im, FieldLabel::Image)?;
    }

    let mut transforms = String::from(
        "# index kind intensity_scale params\n\
         # affine params: matrix (row-major) then translation; rigid params: angles then translation\n\
         # maps apply to coordinates relative to the grid center\n",
    );
    for (i, (t, s)) in result.transforms.iter().zip(&result.intensity_scales).enumerate() {
        let params: Vec<String> = t.params().iter().map(|v| v.to_string()).collect();
        writeln!(transforms, "{i} {} {s} {}", t.kind(), params.join(" ")).unwrap();
    }
    write_file(&out.join("transforms.txt"), transforms)?;

    let mut energy = String::from("# iteration energy frozen centered\n");
    for r in &result.energy_trace {
        writeln!(energy, "{} {} {} {}", r.iteration, r.energy, r.frozen, r.centered).unwrap();
    }
    write_file(&out.join("energy.txt"), energy)?;

    manifest.params = p.into_resolved();
    manifest.seed = Some(cfg.seed);
    manifest.write(&out)?;

    let first = result.energy_trace.first().map_or(f64::NAN, |r| r.energy);
    let last = result.energy_trace.last().map_or(f64::NAN, |r| r.energy);
    let text = format!(
        "images = {}\ntransform = {}\nnorm = {}\nouter_iterations = {}\nenergy_initial = {first}\nenergy_final = {last}\noutput = {}\n",
        stack.len(),
        cfg.transform_kind,
        cfg.norm,
        result.energy_trace.len() - 1,
        out.display()
    );
    Ok(RegisterOutcome { result, report: Report { text, capped: 0 } })
}

pub struct ResolveOutcome {
    pub field: ResolutionField,
    pub report: Report,
}

pub fn cmd_resolve(args: &ResolveArgs, config: &ConfigFile) -> Result<ResolveOutcome> {
    let mut p = Params::new("resolve", config);
    let dir = required_path(&mut p, "registered", args.registered.clone())?;
    existing(&dir)?;
    if !dir.is_dir() {
        return usage(format!("--registered must be a directory, got {}", dir.display()));
    }
    let nested = dir.join("registered");
    let source = if nested.is_dir() { nested } else { dir };
    let files = field_files_in(&source)?;
    if files.len() < 2 {
        return usage(format!("need at least 2 field files in {}", source.display()));
    }
    let mut manifest = RunManifest::new("resolve", Vec::new());
    let stack = ImageStack::new(load_fields(&files, &mut manifest)?)?;

    let extent = stack.shape().iter().copied().max().unwrap_or(1) as f64;
    let cfg = ResolutionConfig::new(
        p.value("eta", args.eta, 0.6)?,
        p.value("p0", args.p0, 0.1)?,
        p.value("p1", args.p1, 0.9)?,
        p.value("step", args.step, 0.25)?,
        p.value("sigma-cap", args.sigma_cap, 2.0 * extent)?,
    )?;
    let slice = slice_for(stack.shape(), p.optional("slice", args.slice.clone())?, &mut p)?;
    let sensitivity = p.switch("sensitivity", args.sensitivity)?;
    let out = required_path(&mut p, "out", args.out.clone())?;

    let field = resolution_measure(&stack, &cfg)?;
    let mut text = format!("images = {}\n", stack.len());
    text.push_str(&summarize(&field));
    if sensitivity {
        for (a, b) in [(0.15, 0.85), (0.05, 0.95)] {
            let alt = resolution_measure(&stack, &ResolutionConfig { p0: a, p1: b, ..cfg })?;
            writeln!(
                text,
                "sensitivity.p0_{a}_p1_{b} = max {} mean_positive {} capped {}",
                alt.max(),
                alt.mean_positive(),
                alt.capped_pixels
            )
            .unwrap();
        }
    }

    create_dir(&out)?;
    write_resolution(&out, &field, slice)?;
    write_file(&out.join("summary.txt"), &text)?;
    manifest.params = p.into_resolved();
    manifest.write(&out)?;
    let capped = field.capped_pixels;
    Ok(ResolveOutcome { field, report: Report { text, capped } })
}

pub fn cmd_visualize(args: &VisualizeArgs, config: &ConfigFile) -> Result<Report> {
    let mut p = Params::new("visualize", config);
    let template_path = required_path(&mut p, "template", args.template.clone())?;
    let sigma_path = required_path(&mut p, "sigma-star", args.sigma_star.clone())?;
    existing(&template_path)?;
    existing(&sigma_path)?;
    let mut manifest = RunManifest::new("visualize", Vec::new());
    let template = load_fields(std::slice::from_ref(&template_path), &mut manifest)?.remove(0);
    let sigma = load_fields(std::slice::from_ref(&sigma_path), &mut manifest)?.remove(0);
    if template.shape() != sigma.shape() {
        return usage(format!(
            "template shape {:?} differs from sigma* shape {:?}",
            template.shape(),
            sigma.shape()
        ));
    }
    let opts = OverlayOptions {
        sigma_g: p.value("sigma-g", args.sigma_g, 1.0)?,
        eps_grad: p.optional("eps-grad", args.eps_grad)?,
        stride: p.optional("stride", args.stride)?,
        slice: slice_for(template.shape(), p.optional("slice", args.slice.clone())?, &mut p)?,
    };
    let out = required_path(&mut p, "out", args.out.clone())?;

    let overlay = build_overlay(&template, &sigma, &opts)?;
    let svg = render_overlay_svg(&template, &overlay, None)?;
    create_dir(&out)?;
    write_file(&out.join("overlay.svg"), svg)?;
    write_file(&out.join("sigma_star.png"), render_heatmap(&sigma, opts.slice)?)?;
    manifest.params = p.into_resolved();
    manifest.write(&out)?;
    Ok(Report {
        text: format!("bars = {}\noutput = {}\n", overlay.bars.len(), out.display()),
        capped: 0,
    })
}

pub struct ModelCheckOutcome {
    pub field: ResolutionField,
    pub grid: EdgeGrid,
    /// `sigma*(center) / tau`; `None` when `tau = 0`.
    pub ratio: Option<f64>,
    pub report: Report,
}

fn analytic_table(tau: f64) -> Result<String> {
    let mut s = String::new();
    writeln!(s, "analytic edge max difference at tau = {tau}:").unwrap();
    for r in [0.25, 0.5, 1.0, 2.0, 4.0, 8.0] {
        let v = edge_max_diff(tau, r * tau)?;
        let note = if r == 1.0 { "  (sigma = tau: 2 Phi(1/2) - 1)" } else { "" };
        writeln!(s, "  sigma/tau = {r:<5} max diff = {v:.6}{note}").unwrap();
    }
    writeln!(s, "point mass linearization at tau = {tau}:").unwrap();
    for r in [2.0, 5.0, 10.0, 20.0] {
        let exact = point_mass_max_diff_exact(tau, r * tau)?;
        let approx = point_mass_max_diff_approx(tau, r * tau)?;
        writeln!(
            s,
            "  sigma/tau = {r:<5} exact = {exact:.6e} approx = {approx:.6e} rel err = {:.4}",
            (exact - approx).abs() / exact
        )
        .unwrap();
    }
    Ok(s)
}

pub fn cmd_model_check(args: &ModelCheckArgs, config: &ConfigFile) -> Result<ModelCheckOutcome> {
    let mut p = Params::new("model-check", config);
    let n = p.value("n", args.n, 1000usize)?;
    let tau = p.value("tau", args.tau, 4.0)?;
    let seed = p.value("seed", args.seed, 0u64)?;
    let len = p.value("len", args.len, 128usize)?;
    let cfg = ResolutionConfig::new(
        1.0,
        p.value("p0", args.p0, 0.1)?,
        p.value("p1", args.p1, 0.9)?,
        p.value("step", args.step, 0.25)?,
        2.0 * len as f64,
    )?;
    p.record("eta", &cfg.eta);
    p.record("sigma-cap", &cfg.sigma_cap);
    let out = p.optional("out", args.out.as_ref().map(|x| x.display().to_string()))?;
    if n < 2 {
        return usage("--n must be >= 2");
    }

    let grid = EdgeGrid::centered(len);
    let sample = sample_edges(&EdgeSampleSpec { n, tau, grid, seed })?;
    let field = resolution_measure(&sample.stack, &cfg)?;
    let center = field.sigma_star.data()[grid.origin];
    let ratio = (tau > 0.0).then(|| center / tau);

    let mut text = format!("edges = {n}\ntau = {tau}\nseed = {seed}\n");
    text.push_str(&summarize(&field));
    writeln!(text, "sigma_star_center = {center}").unwrap();
    match ratio {
        Some(r) => writeln!(text, "ratio_center_over_tau = {r}").unwrap(),
        None => writeln!(text, "ratio_center_over_tau = undefined (tau = 0)").unwrap(),
    }
    writeln!(text, "profile (position sigma*), nonzero entries:").unwrap();
    for (i, &v) in field.sigma_star.data().iter().enumerate() {
        if v > 0.0 {
            writeln!(text, "  {} {v}", grid.position(i)).unwrap();
        }
    }
    text.push_str(&analytic_table(if tau > 0.0 { tau } else { 1.0 })?);

    if let Some(out) = out {
        let out = PathBuf::from(out);
        create_dir(&out)?;
        io::save_field(&out.join("sigma_star.raw"), &field.sigma_star, FieldLabel::SigmaStar)?;
        write_file(&out.join("report.txt"), &text)?;
        let mut manifest = RunManifest::new("model-check", p.into_resolved());
        manifest.seed = Some(seed);
        manifest.write(&out)?;
    }
    let capped = field.capped_pixels;
    Ok(ModelCheckOutcome { field, grid, ratio, report: Report { text, capped } })
}

pub fn cmd_synth3d(args: &Synth3dArgs, config: &ConfigFile) -> Result<Report> {
    let mut p = Params::new("synth3d", config);
    let n = p.value("n", args.n, 8usize)?;
    let size = p.value("size", args.size, 32usize)?;
    let perturb = p.value("perturb", args.perturb, 0.05)?;
    let seed = p.value("seed", args.seed, 0u64)?;
    let out = required_path(&mut p, "out", args.out.clone())?;
    if n == 0 || size < 2 {
        return usage("synth3d needs --n >= 1 and --size >= 2");
    }
    if !(perturb >= 0.0) || !perturb.is_finite() {
        return usage("--perturb must be finite and >= 0");
    }

    let copies = synth_stack(n, size, perturb, seed)?;
    create_dir(&out)?;
    let mut perturbations = String::from("# index matrix (row-major) translation, relative to the grid center\n");
    for (i, (im, t)) in copies.iter().enumerate() {
        io::save_field(&out.join(format!("phantom_{i:04}.raw")), im, FieldLabel::Image)?;
        let params: Vec<String> = t.params().iter().map(|v| v.to_string()).collect();
        writeln!(perturbations, "{i} {}", params.join(" ")).unwrap();
    }
    write_file(&out.join("perturbations.txt"), perturbations)?;
    let mut manifest = RunManifest::new("synth3d", p.into_resolved());
    manifest.seed = Some(seed);
    manifest.write(&out)?;
    Ok(Report {
        text: format!("copies = {n}\nshape = {size}x{size}x{size}\noutput = {}\n", out.display()),
        capped: 0,
    })
}

impl std::fmt::Display for crate::cli::Command {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        use crate::cli::Command::*;
        f.write_str(match self {
            Register(_) => "register",
            Resolve(_) => "resolve",
            Visualize(_) => "visualize",
            ModelCheck(_) => "model-check",
            Synth3d(_) => "synth3d",
        })
    }
}
