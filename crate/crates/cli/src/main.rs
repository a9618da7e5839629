use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use salinst::attention::{
    be_forward, cfm_forward, ma_forward_detailed, BeWeights, CfmWeights, FeaturePyramid, MaWeights,
};
use salinst::boundary::{canny, CannyConfig};
use salinst::crf::{crf_refine, unary_from_saliency, CrfImage};
use salinst::eval::{evaluate, AveragingMode, ImageEval};
use salinst::fmap::{load_map, save_map};
use salinst::maps::to_gray;
use salinst::pipeline::{assemble, exit_code, PipelineConfig, EXIT_BAD_INPUT};
use salinst::pts::{run_pts, AlphaRule, PtsConfig, ToyScene, ToyTrainer, Trainer};
use salinst::synth::{generate, SceneSpec};
use salinst::{DenseMap, GrayImage, InstanceLabelMap, OffsetField};

#[derive(Parser)]
#[command(name = "salinst", version, about = "Salient instance assembly toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic scene bundle (FMAP files plus manifest.txt).
    Synth(SynthArgs),
    /// Canny edge map of an image.
    Canny(CannyArgs),
    /// Seeded forward pass of one attention block; prints output shapes.
    Forward(ForwardArgs),
    /// Instance labels from saliency, boundary and offset maps.
    Assemble(AssembleArgs),
    /// Dense CRF refinement of a probability map.
    Crf(CrfArgs),
    /// Progressive training loop on the built-in toy scene (seeded by --seed); one JSON line per iteration.
    Pts(PtsArgs),
    /// Mask mAP of predicted against ground-truth label maps; prints a JSON report.
    Eval(EvalArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 48)]
    height: usize,
    #[arg(long, default_value_t = 48)]
    width: usize,
    /// Upper bound on the number of shapes; at least one is placed.
    #[arg(long, default_value_t = 4)]
    max_shapes: usize,
    /// Uniform image noise amplitude.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
}

#[derive(Args)]
struct CannyArgs {
    /// Image FMAP with 1 channel or 3 channels in [0, 1].
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Low hysteresis threshold on the 0..255 gradient scale. Auto mode (from the median) if omitted.
    #[arg(long, requires = "high")]
    low: Option<f64>,
    #[arg(long, requires = "low")]
    high: Option<f64>,
    /// Gaussian pre-blur sigma.
    #[arg(long, default_value_t = salinst::boundary::canny::DEFAULT_SIGMA)]
    sigma: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Block {
    Cfm,
    Ma,
    Be,
}

#[derive(Args)]
struct ForwardArgs {
    #[arg(value_enum)]
    block: Block,
    /// Seeds the weights and the generated input.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Spatial size of the (finest) input.
    #[arg(long, default_value_t = 16)]
    size: usize,
    /// Input channels for ma, per-level input channels for cfm, feature width for be.
    #[arg(long, default_value_t = 32)]
    channels: usize,
    /// Mixed width of cfm.
    #[arg(long, default_value_t = salinst::attention::cfm::MIXED_CHANNELS)]
    width: usize,
    /// Optional 3-channel image for be (otherwise generated).
    #[arg(long)]
    image: Option<PathBuf>,
    /// Directory for output FMAP files.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Pipeline settings; flags override values from --config, which override defaults.
#[derive(Args)]
struct PipelineFlags {
    /// key=value file (keys: theta eps max_iters radius chi steps seed crf.w1 crf.w2
    /// crf.sigma_alpha crf.sigma_beta crf.sigma_gamma crf.iterations).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Salient-fraction threshold for keeping an instance [default: 0.5].
    #[arg(long)]
    theta: Option<f64>,
    /// Offset length below which a pixel is settled / a centroid [default: 0.5].
    #[arg(long)]
    eps: Option<f64>,
    /// Offset-chasing iteration cap [default: 100].
    #[arg(long)]
    max_iters: Option<usize>,
    /// Affinity neighborhood radius in pixels [default: 5].
    #[arg(long)]
    radius: Option<usize>,
    /// Affinity exponent [default: 4].
    #[arg(long)]
    chi: Option<u32>,
    /// Random-walk steps [default: 16].
    #[arg(long)]
    steps: Option<usize>,
    /// Seed for seeded subcommands [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Appearance kernel weight [default: 4].
    #[arg(long)]
    crf_w1: Option<f64>,
    /// Smoothness kernel weight [default: 3].
    #[arg(long)]
    crf_w2: Option<f64>,
    /// Appearance kernel spatial sigma [default: 49].
    #[arg(long)]
    crf_sigma_alpha: Option<f64>,
    /// Appearance kernel intensity sigma [default: 5].
    #[arg(long)]
    crf_sigma_beta: Option<f64>,
    /// Smoothness kernel spatial sigma [default: 3].
    #[arg(long)]
    crf_sigma_gamma: Option<f64>,
    /// Mean-field iterations [default: 5].
    #[arg(long)]
    crf_iterations: Option<usize>,
}

impl PipelineFlags {
    fn resolve(&self) -> Result<PipelineConfig> {
        let text = match &self.config {
            Some(p) => {
                Some(fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
            }
            None => None,
        };
        let overrides: Vec<(&str, String)> = [
            ("theta", self.theta.map(|v| v.to_string())),
            ("eps", self.eps.map(|v| v.to_string())),
            ("max_iters", self.max_iters.map(|v| v.to_string())),
            ("radius", self.radius.map(|v| v.to_string())),
            ("chi", self.chi.map(|v| v.to_string())),
            ("steps", self.steps.map(|v| v.to_string())),
            ("seed", self.seed.map(|v| v.to_string())),
            ("crf.w1", self.crf_w1.map(|v| v.to_string())),
            ("crf.w2", self.crf_w2.map(|v| v.to_string())),
            (
                "crf.sigma_alpha",
                self.crf_sigma_alpha.map(|v| v.to_string()),
            ),
            ("crf.sigma_beta", self.crf_sigma_beta.map(|v| v.to_string())),
            (
                "crf.sigma_gamma",
                self.crf_sigma_gamma.map(|v| v.to_string()),
            ),
            ("crf.iterations", self.crf_iterations.map(|v| v.to_string())),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.map(|v| (k, v)))
        .collect();
        Ok(PipelineConfig::resolve(text.as_deref(), overrides)?)
    }
}

#[derive(Args)]
struct AssembleArgs {
    /// Single-channel saliency FMAP.
    #[arg(long)]
    saliency: PathBuf,
    /// Single-channel boundary FMAP.
    #[arg(long)]
    boundary: PathBuf,
    /// Two-channel (dy, dx) offset FMAP.
    #[arg(long)]
    offsets: PathBuf,
    /// Output label FMAP.
    #[arg(long)]
    out: PathBuf,
    /// Text summary (count, then `id area score` lines) [default: stdout].
    #[arg(long)]
    summary: Option<PathBuf>,
    /// Score sidecar (`id score` lines) for eval.
    #[arg(long)]
    scores: Option<PathBuf>,
    #[command(flatten)]
    pipeline: PipelineFlags,
}

#[derive(Args)]
struct CrfArgs {
    /// Probability FMAP: one foreground channel or [bg, fg].
    #[arg(long)]
    prob: PathBuf,
    /// Guidance image FMAP, 1 or 3 channels in [0, 1].
    #[arg(long)]
    image: PathBuf,
    /// Output two-channel marginals.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    pipeline: PipelineFlags,
}

#[derive(Args)]
struct PtsArgs {
    /// Training iterations R.
    #[arg(long, default_value_t = salinst::pts::DEFAULT_ITERATIONS)]
    iterations: usize,
    /// Epochs per iteration E.
    #[arg(long, default_value_t = salinst::pts::DEFAULT_EPOCHS)]
    epochs: usize,
    /// Constant EMA weight instead of r/(r+1).
    #[arg(long)]
    alpha: Option<f64>,
    /// EMA applies for iterations r > this.
    #[arg(long, default_value_t = salinst::pts::DEFAULT_REFRESH_FROM)]
    refresh_from: usize,
    #[command(flatten)]
    pipeline: PipelineFlags,
}

#[derive(Args)]
struct EvalArgs {
    /// Predicted label FMAP; repeat once per image.
    #[arg(long, required = true)]
    pred: Vec<PathBuf>,
    /// Ground-truth label FMAP, paired with --pred by position.
    #[arg(long, required = true)]
    gt: Vec<PathBuf>,
    /// Score sidecar per prediction (`id score` lines). Scores default to 1.
    #[arg(long)]
    scores: Vec<PathBuf>,
    /// IoU threshold; repeatable [default: 0.5 0.7].
    #[arg(long)]
    tau: Vec<f64>,
    /// pooled: rank detections across images; per-image: average per-image AP.
    #[arg(long, default_value = "pooled")]
    mode: AveragingMode,
}

fn load_gray(path: &Path) -> Result<GrayImage> {
    let map = load_map(path)?;
    Ok(match map.channels() {
        3 => to_gray(&map)?,
        _ => GrayImage::from_unit_map(&map)?,
    })
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let spec = SceneSpec {
        noise: a.noise,
        ..SceneSpec::random(a.seed, a.height, a.width, a.max_shapes)
    };
    let b = generate(&spec)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let files = [
        ("image", b.image.clone()),
        ("saliency", b.saliency.clone()),
        ("boundary", b.boundary.clone()),
        ("offsets", b.offsets.to_dense()),
        ("labels", b.labels.to_dense()),
    ];
    let mut manifest = format!(
        "seed={}\nheight={}\nwidth={}\ncount={}\n",
        a.seed, a.height, a.width, b.count.0
    );
    for (name, map) in &files {
        let file = format!("{name}.fmap");
        save_map(map, a.out.join(&file))?;
        manifest.push_str(&format!("{name}={file}\n"));
    }
    for (k, (y, x)) in b.centroids.iter().enumerate() {
        manifest.push_str(&format!("centroid.{}={y},{x}\n", k + 1));
    }
    write(&a.out.join("manifest.txt"), &manifest)
}

fn cmd_canny(a: &CannyArgs) -> Result<()> {
    let img = load_gray(&a.image)?;
    let cfg = match (a.low, a.high) {
        (Some(lo), Some(hi)) => CannyConfig::manual(lo, hi)?,
        _ => CannyConfig::auto(),
    }
    .with_sigma(a.sigma);
    let edges = canny(&img, &cfg)?;
    save_map(&edges, &a.out)?;
    let (lo, hi) = cfg.thresholds(&img);
    let count = edges.data().iter().filter(|&&v| v > 0.0).count();
    println!("low={lo} high={hi} edges={count}");
    Ok(())
}

fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> DenseMap {
    DenseMap::from_fn(h, w, c, |_, _, _| rng.gen_range(-1.0..1.0))
}

fn shape(m: &DenseMap) -> String {
    format!("{}x{}x{}", m.height(), m.width(), m.channels())
}

fn cmd_forward(a: &ForwardArgs) -> Result<()> {
    if a.size == 0 || a.channels == 0 {
        bail!(salinst::Error::InvalidArgument(
            "size and channels must be >= 1".into()
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut outputs: Vec<(String, DenseMap)> = Vec::new();
    match a.block {
        Block::Cfm => {
            let levels = (0..5)
                .map(|k| {
                    let s = (a.size >> k).max(1);
                    random_map(&mut rng, s, s, a.channels)
                })
                .collect();
            let pyr = FeaturePyramid::new(levels)?;
            let w = CfmWeights::seeded_with_width([a.channels; 5], a.width, a.seed);
            for (k, level) in cfm_forward(&pyr, &w)?.into_levels().into_iter().enumerate() {
                outputs.push((format!("cfm_level{}", k + 1), level));
            }
        }
        Block::Ma => {
            let f = random_map(&mut rng, a.size, a.size, a.channels);
            let out = ma_forward_detailed(&f, &MaWeights::seeded(a.channels, a.seed))?;
            let (lo, hi) = out
                .channel_attention
                .iter()
                .chain(out.spatial_attention.data())
                .fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &v| {
                    (l.min(v), h.max(v))
                });
            println!("attention_range {lo} {hi}");
            outputs.push(("ma_spatial".into(), out.spatial_attention));
            outputs.push(("ma_output".into(), out.output));
        }
        Block::Be => {
            let image = match &a.image {
                Some(p) => load_map(p)?,
                None => DenseMap::from_fn(a.size, a.size, 3, |_, _, _| rng.gen_range(0.0..1.0)),
            };
            let gray = to_gray(&image)?;
            let edges = canny(&gray, &CannyConfig::auto())?;
            let (b1, b2) = be_forward(&image, &edges, &BeWeights::seeded(a.channels, a.seed))?;
            outputs.push(("be_edges".into(), edges));
            outputs.push(("be_fb1".into(), b1));
            outputs.push(("be_fb2".into(), b2));
        }
    }
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    for (name, map) in &outputs {
        println!("{name} {}", shape(map));
        if let Some(dir) = &a.out {
            save_map(map, dir.join(format!("{name}.fmap")))?;
        }
    }
    Ok(())
}

fn cmd_assemble(a: &AssembleArgs) -> Result<()> {
    let cfg = a.pipeline.resolve()?;
    let saliency = load_map(&a.saliency)?;
    let boundary = load_map(&a.boundary)?;
    let offsets = OffsetField::from_dense(&load_map(&a.offsets)?)?;
    let out = assemble(&saliency, &boundary, &offsets, &cfg)?;
    save_map(&out.labels.to_dense(), &a.out)?;
    let summary = out.summary();
    match &a.summary {
        Some(p) => write(p, &summary)?,
        None => print!("{summary}"),
    }
    if let Some(p) = &a.scores {
        let text: String = out
            .scores
            .iter()
            .enumerate()
            .map(|(k, s)| format!("{} {s}\n", k + 1))
            .collect();
        write(p, &text)?;
    }
    Ok(())
}

fn cmd_crf(a: &CrfArgs) -> Result<()> {
    let cfg = a.pipeline.resolve()?;
    let prob = load_map(&a.prob)?;
    let prob = if prob.channels() == 1 {
        unary_from_saliency(&prob)?
    } else {
        prob
    };
    let image = load_map(&a.image)?;
    let gray;
    let guide = match image.channels() {
        3 => CrfImage::Rgb(&image),
        _ => {
            gray = GrayImage::from_unit_map(&image)?;
            CrfImage::Gray(&gray)
        }
    };
    save_map(&crf_refine(&prob, guide, &cfg.crf)?, &a.out)?;
    Ok(())
}

#[derive(Serialize)]
struct PtsLine {
    iteration: usize,
    alpha: Option<f64>,
    loss: f64,
    accuracy: f64,
    label_hash: String,
}

fn cmd_pts(a: &PtsArgs) -> Result<()> {
    let pipeline = a.pipeline.resolve()?;
    let cfg = PtsConfig {
        iterations: a.iterations,
        epochs: a.epochs,
        alpha_rule: a.alpha.map_or(AlphaRule::Progressive, AlphaRule::Constant),
        refresh_from: a.refresh_from,
    };
    let scene = ToyScene::generate(pipeline.seed);
    let mut trainer = ToyTrainer::new(vec![scene.features.clone()]);
    let out = run_pts(
        vec![scene.noisy.clone()],
        std::slice::from_ref(&scene.image),
        ToyTrainer::initial_params(),
        &mut trainer,
        &pipeline.crf,
        &cfg,
    )?;
    for (rec, params) in out.trail.iter().zip(&out.snapshots) {
        let line = PtsLine {
            iteration: rec.iteration,
            alpha: rec.alpha,
            loss: rec.loss,
            accuracy: scene.accuracy(&trainer.predict(params)?[0]),
            label_hash: rec.label_hash.clone(),
        };
        println!("{}", serde_json::to_string(&line)?);
    }
    Ok(())
}

fn read_scores(path: &Path, count: u32) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut scores = vec![None; count as usize];
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parsed = line
            .split_once(char::is_whitespace)
            .and_then(|(id, s)| Some((id.parse::<usize>().ok()?, s.trim().parse::<f64>().ok()?)));
        match parsed {
            Some((id, s)) if (1..=count as usize).contains(&id) => scores[id - 1] = Some(s),
            _ => bail!(salinst::Error::InvalidArgument(format!(
                "{}:{}: expected `id score` with id in 1..={count}",
                path.display(),
                n + 1
            ))),
        }
    }
    scores
        .into_iter()
        .enumerate()
        .map(|(k, s)| {
            s.ok_or_else(|| {
                salinst::Error::InvalidArgument(format!(
                    "{}: no score for instance {}",
                    path.display(),
                    k + 1
                ))
                .into()
            })
        })
        .collect()
}

#[derive(Serialize)]
struct EvalJson {
    mode: String,
    images: usize,
    map: std::collections::BTreeMap<String, f64>,
    ap_per_image: Vec<std::collections::BTreeMap<String, f64>>,
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    if a.pred.len() != a.gt.len() || (!a.scores.is_empty() && a.scores.len() != a.pred.len()) {
        bail!(salinst::Error::InvalidArgument(
            "--pred, --gt and --scores must be given the same number of times".into()
        ));
    }
    let taus = if a.tau.is_empty() {
        vec![0.5, 0.7]
    } else {
        a.tau.clone()
    };
    let mut images = Vec::with_capacity(a.pred.len());
    for (k, (p, g)) in a.pred.iter().zip(&a.gt).enumerate() {
        let pred = InstanceLabelMap::from_dense(&load_map(p)?)?;
        let gt = InstanceLabelMap::from_dense(&load_map(g)?)?;
        let scores = match a.scores.get(k) {
            Some(s) => read_scores(s, pred.count())?,
            None => vec![1.0; pred.count() as usize],
        };
        images.push(ImageEval::from_label_maps(&pred, &gt, &scores)?);
    }
    let report = evaluate(&images, &taus, a.mode)?;
    let json = EvalJson {
        mode: report.mode.to_string(),
        images: images.len(),
        map: report.map_at,
        ap_per_image: report.ap_per_image,
    };
    println!("{}", serde_json::to_string_pretty(&json)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Canny(a) => cmd_canny(a),
        Command::Forward(a) => cmd_forward(a),
        Command::Assemble(a) => cmd_assemble(a),
        Command::Crf(a) => cmd_crf(a),
        Command::Pts(a) => cmd_pts(a),
        Command::Eval(a) => cmd_eval(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let code = err
                .downcast_ref::<salinst::Error>()
                .map_or(EXIT_BAD_INPUT, exit_code);
            ExitCode::from(code as u8)
        }
    }
}
