//! Command implementations behind the `concl` binary.

use std::path::{Path, PathBuf};
use std::time::Instant;

use concl_core::concepts::{fh_segment, grid_concepts, kmeans_concepts, ConceptMask, FhParams};
use concl_core::encoder::{forward_stages, EncoderParams};
use concl_core::gradcheck;
use concl_core::image::{synth_dataset, SynthConfig};
use concl_core::probe::{evaluate, ProbeConfig};
use concl_core::rng::{self, domain};

use crate::checkpoint::Checkpoint;
use crate::config::ConfigFile;
use crate::io::{load_folder, read_image, write_pgm, write_ppm, write_atomic};
use crate::report::{write_probe_report, RunManifest};
use crate::run::{run_files, train_run, RunError, RunOptions};

/// Command failure, mapped to the process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CmdError {
    /// Bad flags, configuration or inputs: exit code 1.
    #[error("{0:#}")]
    Usage(anyhow::Error),
    /// Divergence or a failed numerical check: exit code 2.
    #[error("{0:#}")]
    Numeric(anyhow::Error),
}

impl CmdError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CmdError::Usage(_) => 1,
            CmdError::Numeric(_) => 2,
        }
    }
}

fn usage<E: Into<anyhow::Error>>(e: E) -> CmdError {
    CmdError::Usage(e.into())
}

fn mkdir(dir: &Path) -> Result<(), CmdError> {
    std::fs::create_dir_all(dir).map_err(|e| usage(anyhow::anyhow!("cannot create {}: {e}", dir.display())))
}

fn config_json(c: &ConfigFile) -> serde_json::Value {
    serde_json::to_value(c).expect("config serializes")
}

pub struct PretrainArgs {
    pub config: Option<PathBuf>,
    pub data: String,
    pub out: PathBuf,
    pub resume: Option<PathBuf>,
    pub workers: usize,
    pub stop_after: Option<u32>,
}

pub fn pretrain(a: &PretrainArgs) -> Result<(), CmdError> {
    let t0 = Instant::now();
    let file_config = match &a.config {
        Some(p) => Some(ConfigFile::load(p).map_err(usage)?),
        None => None,
    };
    let mut ckpt = match &a.resume {
        Some(p) => {
            let ck = Checkpoint::load(p).map_err(usage)?;
            if let Some(c) = &file_config {
                if *c != ck.config {
                    return Err(usage(anyhow::anyhow!("--config differs from the configuration stored in {}", p.display())));
                }
            }
            ck
        }
        None => {
            let mut c = file_config.unwrap_or_default();
            if a.config.is_none() {
                c.apply_env().map_err(usage)?;
            }
            Checkpoint::new(c).map_err(usage)?
        }
    };
    if a.workers == 0 {
        return Err(usage(anyhow::anyhow!("--workers must be at least 1")));
    }
    mkdir(&a.out)?;
    let opts = RunOptions {
        out_dir: a.out.clone(),
        workers: a.workers,
        stop_after: a.stop_after,
    };
    let result = if a.data == "synth" {
        let data = synth_dataset(&ckpt.config.synth_config()).map_err(usage)?;
        log::info!("synthetic dataset: {} images", data.len());
        train_run(&mut ckpt, &data, &opts)
    } else {
        let dir = Path::new(&a.data);
        if !dir.is_dir() {
            return Err(usage(anyhow::anyhow!("--data must be `synth` or a directory, got {}", a.data)));
        }
        let data = load_folder(dir, ckpt.config.image_size).map_err(usage)?;
        log::info!("loaded {} images from {}", data.len(), dir.display());
        train_run(&mut ckpt, &data, &opts)
    };
    match result {
        Ok(()) => {}
        Err(e @ RunError::Diverged { .. }) => return Err(CmdError::Numeric(e.into())),
        Err(e) => return Err(usage(e)),
    }
    let (ck, metrics) = run_files(&a.out);
    let mut m = RunManifest::new("pretrain", config_json(&ckpt.config), ckpt.config.seed);
    m.inputs.push(a.data.clone());
    if let Some(r) = &a.resume {
        m.inputs.push(r.display().to_string());
    }
    m.outputs = vec![ck.display().to_string(), metrics.display().to_string()];
    m.write(&a.out, t0.elapsed()).map_err(usage)
}

pub struct MasksArgs {
    pub gen: String,
    pub s: usize,
    pub scale: f64,
    pub min_size: Option<usize>,
    pub sigma: f64,
    pub k: usize,
    pub stage: usize,
    pub iters: usize,
    pub input: PathBuf,
    pub ckpt: Option<PathBuf>,
    pub out: PathBuf,
    pub size: usize,
    pub seed: u64,
}

/// Gray level of each label: labels spread evenly over `0..=255`.
pub fn label_gray(mask: &ConceptMask) -> Vec<u8> {
    let top = mask.n_concepts.saturating_sub(1).max(1) as f64;
    mask.labels.iter().map(|&l| (l as f64 * 255.0 / top).round() as u8).collect()
}

/// Concept mask of one image, as the `masks` command computes it.
pub fn compute_mask(a: &MasksArgs, key: Option<&EncoderParams>) -> Result<ConceptMask, CmdError> {
    let image = read_image(&a.input).map_err(usage)?;
    let image = if image.height() != a.size || image.width() != a.size { image.resize_bilinear(a.size, a.size) } else { image };
    match a.gen.as_str() {
        "grid" => grid_concepts(a.s, a.size).map_err(usage),
        "fh" => {
            let p = FhParams {
                scale: a.scale,
                min_size: a.min_size.unwrap_or((a.scale.round() as usize).max(1)),
                sigma: a.sigma,
            };
            fh_segment(&image, &p).map_err(usage)
        }
        "bootstrap" => {
            let key = key.ok_or_else(|| usage(anyhow::anyhow!("--gen bootstrap requires --ckpt")))?;
            if !(1..=5).contains(&a.stage) {
                return Err(usage(anyhow::anyhow!("--stage must lie in 1..=5")));
            }
            let f = forward_stages(key, &image).map_err(usage)?;
            let mut r = rng::stream(a.seed, domain::CONCEPTS, 0, 0);
            let (m, _) = kmeans_concepts(&f[a.stage - 1], a.k, a.iters, &mut r, a.size).map_err(usage)?;
            Ok(m)
        }
        other => Err(usage(anyhow::anyhow!("--gen must be grid, fh or bootstrap, got `{other}`"))),
    }
}

/// Writes the mask PGM and returns the number of concepts.
pub fn masks(a: &MasksArgs) -> Result<usize, CmdError> {
    let t0 = Instant::now();
    let ck = match &a.ckpt {
        Some(p) => Some(Checkpoint::load(p).map_err(usage)?),
        None => None,
    };
    let mask = compute_mask(a, ck.as_ref().map(|c| &c.state.pair.key))?;
    let dir = a.out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new(".")).to_path_buf();
    mkdir(&dir)?;
    write_pgm(&a.out, mask.height, mask.width, &label_gray(&mask)).map_err(usage)?;
    let config = serde_json::json!({
        "gen": a.gen, "s": a.s, "scale": a.scale, "min_size": a.min_size, "sigma": a.sigma,
        "k": a.k, "stage": a.stage, "iters": a.iters, "size": a.size,
    });
    let mut m = RunManifest::new("masks", config, a.seed);
    m.inputs.push(a.input.display().to_string());
    if let Some(c) = &a.ckpt {
        m.inputs.push(c.display().to_string());
    }
    m.outputs.push(a.out.display().to_string());
    m.write(&dir, t0.elapsed()).map_err(usage)?;
    Ok(mask.n_concepts)
}

pub struct ProbeArgs {
    pub ckpt: Option<PathBuf>,
    pub config: Option<PathBuf>,
    pub encoder: String,
    pub out: PathBuf,
    pub stage: usize,
    pub epochs: usize,
    pub seed: u64,
    pub n_train: usize,
    pub n_eval: usize,
    pub synth_seed: u64,
}

pub fn probe(a: &ProbeArgs) -> Result<ProbeReportSummary, CmdError> {
    let t0 = Instant::now();
    let (config, params) = match &a.ckpt {
        Some(p) => {
            let ck = Checkpoint::load(p).map_err(usage)?;
            let params = match a.encoder.as_str() {
                "online" => ck.state.pair.online,
                "key" => ck.state.pair.key,
                other => return Err(usage(anyhow::anyhow!("--encoder must be online or key, got `{other}`"))),
            };
            (ck.config, params)
        }
        None => {
            let c = match &a.config {
                Some(p) => ConfigFile::load(p).map_err(usage)?,
                None => ConfigFile::default(),
            };
            let t = c.train_config().map_err(usage)?;
            let mut r = rng::stream(t.seed, domain::INIT, 0, 0);
            let params = EncoderParams::init(t.encoder, &mut r).map_err(usage)?;
            (c, params)
        }
    };
    let synth = SynthConfig {
        seed: a.synth_seed,
        n_images: a.n_train + a.n_eval,
        size: config.image_size,
        n_regions: config.synth_regions,
        n_textures: config.synth_textures,
    };
    let data = synth_dataset(&synth).map_err(usage)?;
    let (train, eval) = data.split_at(a.n_train);
    let pc = ProbeConfig {
        stage: a.stage,
        epochs: a.epochs,
        seed: a.seed,
        ..ProbeConfig::default()
    };
    let report = evaluate(&params, train, eval, &pc).map_err(usage)?;
    mkdir(&a.out)?;
    write_probe_report(&a.out, &report, &[a.seed, a.synth_seed]).map_err(usage)?;
    let mut m = RunManifest::new(
        "probe",
        serde_json::json!({ "train": config_json(&config), "stage": a.stage, "epochs": a.epochs, "encoder": a.encoder,
            "n_train": a.n_train, "n_eval": a.n_eval, "synth_seed": a.synth_seed }),
        a.seed,
    );
    if let Some(c) = &a.ckpt {
        m.inputs.push(c.display().to_string());
    }
    m.outputs = vec![a.out.join("probe.csv").display().to_string(), a.out.join("probe.json").display().to_string()];
    m.write(&a.out, t0.elapsed()).map_err(usage)?;
    Ok(ProbeReportSummary {
        miou: report.miou,
        knn_acc: report.knn_acc.unwrap_or(0.0),
        purity: report.purity.unwrap_or(0.0),
    })
}

pub struct ProbeReportSummary {
    pub miou: f64,
    pub knn_acc: f64,
    pub purity: f64,
}

pub fn gradcheck_cmd(out: &Path, seed: u64, instances: usize) -> Result<(), CmdError> {
    let t0 = Instant::now();
    mkdir(out)?;
    let mut csv = String::from("check,instances,rejected,max_error,passed\n");
    let mut failed = Vec::new();
    for name in gradcheck::all_checks() {
        let r = gradcheck::run_check(name, seed, instances).map_err(|e| CmdError::Numeric(e.into()))?;
        log::info!("{:24} max error {:.3e}", r.name, r.max_error);
        csv.push_str(&format!("{},{},{},{:e},{}\n", r.name, r.instances, r.rejected, r.max_error, r.passed()));
        if !r.passed() {
            failed.push(r.name);
        }
    }
    write_atomic(&out.join("gradcheck.csv"), csv.as_bytes()).map_err(usage)?;
    let mut m = RunManifest::new(
        "gradcheck",
        serde_json::json!({ "step": gradcheck::STEP, "tolerance": gradcheck::TOLERANCE, "instances": instances }),
        seed,
    );
    m.outputs.push(out.join("gradcheck.csv").display().to_string());
    m.write(out, t0.elapsed()).map_err(usage)?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CmdError::Numeric(anyhow::anyhow!("gradient check failed for {}", failed.join(", "))))
    }
}

pub struct SynthArgs {
    pub out: PathBuf,
    pub seed: u64,
    pub n: usize,
    pub size: usize,
    pub regions: usize,
    pub textures: usize,
}

pub fn synth(a: &SynthArgs) -> Result<(), CmdError> {
    let t0 = Instant::now();
    let cfg = SynthConfig {
        seed: a.seed,
        n_images: a.n,
        size: a.size,
        n_regions: a.regions,
        n_textures: a.textures,
    };
    let data = synth_dataset(&cfg).map_err(usage)?;
    mkdir(&a.out)?;
    let mut csv = String::from("image,region,texture\n");
    let mut outputs = Vec::new();
    for (i, p) in data.iter().enumerate() {
        let img = a.out.join(format!("img_{i:04}.ppm"));
        let lbl = a.out.join(format!("lbl_{i:04}.pgm"));
        write_ppm(&img, &p.image).map_err(usage)?;
        let gray: Vec<u8> = p.gt_labels.labels.iter().map(|&l| l as u8).collect();
        write_pgm(&lbl, p.gt_labels.height, p.gt_labels.width, &gray).map_err(usage)?;
        for (r, t) in p.region_texture.iter().enumerate() {
            csv.push_str(&format!("{i},{r},{t}\n"));
        }
        outputs.push(img.display().to_string());
        outputs.push(lbl.display().to_string());
    }
    let table = a.out.join("regions.csv");
    write_atomic(&table, csv.as_bytes()).map_err(usage)?;
    outputs.push(table.display().to_string());
    let mut m = RunManifest::new(
        "synth",
        serde_json::json!({ "n_images": a.n, "size": a.size, "n_regions": a.regions, "n_textures": a.textures }),
        a.seed,
    );
    m.outputs = outputs;
    m.write(&a.out, t0.elapsed()).map_err(usage)
}

