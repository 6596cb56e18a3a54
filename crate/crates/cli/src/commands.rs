use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use flowcrypt::crypt::{self, ClasswiseContext, EncryptionContext};
use flowcrypt::format::{self, Dataset};
use flowcrypt::leakage::{self, DlgConfig, LinearVictim, ToyClassifier, Victim};
use flowcrypt::linalg::OrthogonalKey;
use flowcrypt::rng::{derive_seed, seeded};
use flowcrypt::security::{self, AuditConfig, FeatureLabel, FeatureSamples, FeatureSource, TVEstimate, TvMethod};
use flowcrypt::train::{self, TrainConfig};
use flowcrypt::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::io::{load_dataset, load_dataset_at, print_report, read_json, save_dataset};
use crate::{Cli, Command, CryptArgs, Source};

pub fn run(cli: &Cli) -> Result<()> {
    let seed = cli.seed.unwrap_or(0);
    match &cli.command {
        Command::Keygen { dim, out } => keygen(*dim, out, seed),
        Command::Train {
            data,
            config,
            out_model,
            log,
        } => {
            let ds = load_dataset(data)?;
            train(&ds, config.as_deref(), cli.seed, out_model, log.as_deref())
        }
        Command::Encrypt(args) => crypt_files(args, cli, true),
        Command::Decrypt(args) => crypt_files(args, cli, false),
        Command::EvalBpd { model, data, alpha } => eval_bpd(model, &load_dataset(data)?, *alpha),
        Command::Tv {
            p,
            q,
            mu1,
            mu2,
            sigma,
        } => match (p, q, mu1, mu2, sigma) {
            (Some(p), Some(q), ..) => tv_empirical(p, q, seed),
            (_, _, Some(a), Some(b), Some(s)) => print_report(&TVEstimate {
                value: security::tv_analytic_gaussian(*a, *b, *s)?,
                method: TvMethod::Analytic,
                ci_halfwidth: 0.0,
            }),
            _ => Err(Error::InvalidArgument(
                "give either --p and --q, or --mu1, --mu2 and --sigma".into(),
            )),
        },
        Command::Audit {
            theta,
            n,
            trials,
            source,
            model,
            data,
            grid_size,
            ball_samples,
        } => {
            let config = AuditConfig {
                theta: *theta,
                n: *n,
                trials: *trials,
                seed,
                grid_size: *grid_size,
                ball_samples: *ball_samples,
            };
            let report = match source {
                Source::ExactGaussian => security::theorem_bound_audit(&FeatureSource::ExactGaussian, &config)?,
                Source::Flow => {
                    let flow = format::read_model(model.as_deref().expect("required by clap"))?;
                    let ds = load_dataset_at(data.as_deref().expect("required by clap"), false)?;
                    security::theorem_bound_audit(
                        &FeatureSource::Flow {
                            flow: &flow,
                            data: &ds.samples,
                        },
                        &config,
                    )?
                }
            };
            print_report(&report)
        }
        Command::AttackDlg {
            victim_config,
            data,
            index,
            encrypted,
            model,
            key,
            out,
        } => {
            let vc: VictimConfig = read_json(victim_config)?;
            let ds = load_dataset(data)?;
            let ctx = if *encrypted {
                Some(crypt::load_context(
                    model.as_deref().expect("required by clap"),
                    key.as_deref().expect("required by clap"),
                )?)
            } else {
                None
            };
            attack_dlg(&vc, &ds, *index, ctx.as_ref(), seed, out.as_deref(), cli)
        }
    }
}

fn keygen(dim: usize, out: &Path, seed: u64) -> Result<()> {
    let key = OrthogonalKey::generate(dim, seed)?;
    format::write_key(out, &key)?;
    print_report(&serde_json::json!({
        "dim": dim,
        "seed": seed,
        "orthogonality_error": key.matrix().orthogonality_error(),
    }))
}

fn train(ds: &Dataset, config: Option<&Path>, seed: Option<u64>, out: &Path, log: Option<&Path>) -> Result<()> {
    let mut cfg: TrainConfig = match config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let outcome = train::train_flow(&ds.samples, &cfg)?;
    format::write_model(out, &outcome.model)?;

    let log_path = log.map(Path::to_path_buf).unwrap_or_else(|| {
        let mut p = out.as_os_str().to_owned();
        p.push(".log.jsonl");
        PathBuf::from(p)
    });
    let mut w = std::io::BufWriter::new(std::fs::File::create(&log_path)?);
    for rec in &outcome.history {
        serde_json::to_writer(&mut w, rec).map_err(|e| Error::Io(e.into()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;

    print_report(&serde_json::json!({
        "steps": cfg.steps,
        "seed": cfg.seed,
        "initial_nll": train::nll_loss(&outcome.initial, &ds.samples)?,
        "final_nll": train::nll_loss(&outcome.model, &ds.samples)?,
        "log": log_path.display().to_string(),
    }))
}

#[derive(Deserialize)]
struct ManifestEntry {
    model: PathBuf,
    key: PathBuf,
}

fn load_class_map(path: &Path) -> Result<ClasswiseContext> {
    let entries: BTreeMap<String, ManifestEntry> = read_json(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut ctx = ClasswiseContext::new();
    for (label, entry) in entries {
        let label: u32 = label
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("class map key {label:?} is not an integer label")))?;
        ctx.insert(label, crypt::load_context(&base.join(entry.model), &base.join(entry.key))?)?;
    }
    Ok(ctx)
}

fn crypt_files(args: &CryptArgs, cli: &Cli, encrypt: bool) -> Result<()> {
    let ds = load_dataset(&args.data)?;
    let result = if let Some(map) = &args.class_map {
        let ctx = load_class_map(map)?;
        let labels = ds
            .labels
            .as_deref()
            .ok_or_else(|| Error::ShapeMismatch("per-class mode needs a labelled dataset".into()))?;
        if encrypt {
            crypt::encrypt_dataset(&ctx, &ds.samples, labels)?
        } else {
            crypt::decrypt_dataset(&ctx, &ds.samples, labels)?
        }
    } else {
        let ctx: EncryptionContext = crypt::load_context(
            args.model.as_deref().expect("required by clap"),
            args.key.as_deref().expect("required by clap"),
        )?;
        let samples = if encrypt {
            ctx.encrypt_all(&ds.samples)?
        } else {
            ctx.decrypt_all(&ds.samples)?
        };
        crypt::EncryptedDataset {
            samples,
            labels: ds.labels.clone(),
            provenance: ctx.fingerprint(),
        }
    };
    let provenance = result.provenance.clone();
    let out = result.into_dataset()?;
    save_dataset(&args.out, &out, cli.format)?;
    print_report(&serde_json::json!({
        "operation": if encrypt { "encrypt" } else { "decrypt" },
        "samples": out.len(),
        "dim": out.dim(),
        "provenance": provenance,
    }))
}

fn eval_bpd(model: &Path, ds: &Dataset, alpha: Option<f64>) -> Result<()> {
    let flow = format::read_model(model)?;
    let (bpd, method) = match alpha {
        Some(a) => {
            if !(0.0..0.5).contains(&a) {
                return Err(Error::InvalidArgument(format!("alpha must lie in [0, 0.5), got {a}")));
            }
            let bytes = ds
                .samples
                .iter()
                .map(|row| {
                    row.iter()
                        .map(|&v| {
                            if v.fract() == 0.0 && (0.0..=255.0).contains(&v) {
                                Ok(v as u8)
                            } else {
                                Err(Error::InvalidArgument(format!(
                                    "dequantized BPD needs integer values in [0, 255], got {v}"
                                )))
                            }
                        })
                        .collect::<Result<Vec<u8>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            (flow.bits_per_dim(&bytes, a)?, "dequantized")
        }
        None => (flow.bits_per_dim_continuous(&ds.samples)?, "continuous"),
    };
    print_report(&serde_json::json!({ "bpd": bpd, "method": method, "alpha": alpha, "samples": ds.len() }))
}

fn tv_empirical(p: &Path, q: &Path, seed: u64) -> Result<()> {
    let p = FeatureSamples::new(FeatureLabel::H0, load_dataset_at(p, false)?.samples)?;
    let q = FeatureSamples::new(FeatureLabel::H1, load_dataset_at(q, false)?.samples)?;
    let est = security::tv_empirical(&p, &q, &mut seeded(seed))?;
    print_report(&est)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "lowercase")]
enum VictimKind {
    Linear,
    Classifier,
}

/// Victim and attack settings for `attack-dlg`.
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
struct VictimConfig {
    kind: VictimKind,
    /// Hidden layer widths of the classifier.
    hidden: Vec<usize>,
    classes: usize,
    /// Class index for the classifier, regression target for the linear
    /// victim.
    label: f64,
    /// Give the attacker the true label.
    known_label: bool,
    attack: DlgConfig,
}

impl Default for VictimConfig {
    fn default() -> Self {
        Self {
            kind: VictimKind::Classifier,
            hidden: vec![32],
            classes: 10,
            label: 0.0,
            known_label: false,
            attack: DlgConfig::default(),
        }
    }
}

fn attack_dlg(
    vc: &VictimConfig,
    ds: &Dataset,
    index: usize,
    ctx: Option<&EncryptionContext>,
    seed: u64,
    out: Option<&Path>,
    cli: &Cli,
) -> Result<()> {
    let original = ds
        .samples
        .get(index)
        .ok_or_else(|| Error::InvalidArgument(format!("row {index} out of range for {} samples", ds.len())))?;
    let input = match ctx {
        Some(c) => c.encrypt_sample(original)?,
        None => original.clone(),
    };
    let m = input.len();
    let mut rng = seeded(derive_seed(seed, 0));
    let (victim, label): (Box<dyn Victim>, Vec<f64>) = match vc.kind {
        VictimKind::Linear => (Box::new(LinearVictim::new(m, &mut rng)?), vec![vc.label]),
        VictimKind::Classifier => {
            if vc.label < 0.0 || vc.label.fract() != 0.0 {
                return Err(Error::InvalidArgument(format!("class label must be a non-negative integer, got {}", vc.label)));
            }
            let sizes: Vec<usize> = std::iter::once(m).chain(vc.hidden.iter().copied()).chain([vc.classes]).collect();
            (
                Box::new(ToyClassifier::new(&sizes, &mut rng)?),
                leakage::one_hot(vc.label as usize, vc.classes)?,
            )
        }
    };
    let target = victim.gradients(&input, &label)?;
    let config = DlgConfig {
        seed: derive_seed(seed, 1),
        known_label: vc.known_label.then(|| label.clone()),
        ..vc.attack.clone()
    };
    let result = leakage::dlg_attack(victim.as_ref(), &target, &config)?;
    let mut report = result.report(&input, ctx.map(|_| original.as_slice()))?;
    report.seed = seed;
    if let Some(path) = out {
        save_dataset(path, &Dataset::new(vec![result.input.clone()], None)?, cli.format)?;
    }
    print_report(&report)
}
