//! Flat `key = value` pipeline configuration.

use std::path::Path;

use hpaf_core::cps::{PhaseWindow, PhaseWindows};
use hpaf_core::encoder::ModelConfig;
use hpaf_core::enrollment::{Metric, DEFAULT_PROTOTYPES};
use hpaf_core::evaluation::ProtocolConfig;
use hpaf_core::ingest::{CsvOptions, IdPattern, DEFAULT_CSV_RATE};
use hpaf_core::prep::PrepConfig;
use hpaf_core::seed::derive_seed;
use hpaf_core::synth::{DatasetSpec, SynthConfig};
use hpaf_core::training::TrainConfig;
use hpaf_core::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSettings {
    pub subjects: usize,
    pub sessions: usize,
    pub duration_secs: f64,
    pub render: SynthConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IngestSettings {
    pub lead: usize,
    pub csv_column: usize,
    pub csv_rate: f64,
    pub csv_header: bool,
    pub id_pattern: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    /// Root of every random stream.
    pub seed: u64,
    pub prep: PrepConfig,
    pub windows: PhaseWindows,
    pub model: ModelConfig,
    /// `seed` is ignored here and derived from the root seed.
    pub train: TrainConfig,
    pub prototypes: usize,
    pub metric: Metric,
    pub train_fraction: f64,
    pub verify_threshold: f64,
    pub synth: SynthSettings,
    pub ingest: IngestSettings,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            prep: PrepConfig::default(),
            windows: PhaseWindows::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            prototypes: DEFAULT_PROTOTYPES,
            metric: Metric::Cosine,
            train_fraction: 0.5,
            verify_threshold: 0.5,
            synth: SynthSettings {
                subjects: 16,
                sessions: 2,
                duration_secs: 60.0,
                render: SynthConfig::default(),
            },
            ingest: IngestSettings {
                lead: 0,
                csv_column: 0,
                csv_rate: DEFAULT_CSV_RATE,
                csv_header: false,
                id_pattern: "<subject>_<session>".into(),
            },
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!(
            "{key}: expected true or false, got {value:?}"
        ))),
    }
}

fn parse_window(key: &str, value: &str) -> Result<PhaseWindow> {
    let (a, b) = value
        .split_once(',')
        .ok_or_else(|| Error::Config(format!("{key}: expected `start,end`, got {value:?}")))?;
    Ok(PhaseWindow::new(
        parse_num(key, a.trim())?,
        parse_num(key, b.trim())?,
    ))
}

fn window_text(w: PhaseWindow) -> String {
    format!("{},{}", w.start, w.end)
}

impl PipelineConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse_num(key, v)?,
            "prep.low_cut" => self.prep.low_cut = parse_num(key, v)?,
            "prep.high_cut" => self.prep.high_cut = parse_num(key, v)?,
            "prep.target_rate" => self.prep.target_rate = parse_num(key, v)?,
            "prep.filter_order" => self.prep.filter_order = parse_num(key, v)?,
            "windows.p" => self.windows.p = parse_window(key, v)?,
            "windows.qrs" => self.windows.qrs = parse_window(key, v)?,
            "windows.st" => self.windows.st = parse_window(key, v)?,
            "windows.tu" => self.windows.tu = parse_window(key, v)?,
            "model.embed_dim" => self.model.embed_dim = parse_num(key, v)?,
            "model.gabor_channels" => self.model.gabor_channels = parse_num(key, v)?,
            "model.kernel_len" => self.model.kernel_len = parse_num(key, v)?,
            "model.msfb_width" => self.model.msfb_width = parse_num(key, v)?,
            "model.fuse_channels" => self.model.fuse_channels = parse_num(key, v)?,
            "model.leaky_slope" => self.model.leaky_slope = parse_num(key, v)?,
            "model.ln_eps" => self.model.ln_eps = parse_num(key, v)?,
            "train.epochs" => self.train.epochs = parse_num(key, v)?,
            "train.batch_size" => self.train.batch_size = parse_num(key, v)?,
            "train.momentum" => self.train.momentum = parse_num(key, v)?,
            "train.base_lr" => self.train.base_lr = parse_num(key, v)?,
            "train.eta_min" => self.train.eta_min = parse_num(key, v)?,
            "train.margin" => self.train.margin = parse_num(key, v)?,
            "train.strict_paper_mining" => self.train.strict_paper_mining = parse_bool(key, v)?,
            "train.warmup_epochs" => self.train.warmup_epochs = parse_num(key, v)?,
            "train.clip_norm" => {
                self.train.clip_norm = match v {
                    "none" => None,
                    _ => Some(parse_num(key, v)?),
                }
            }
            "enroll.prototypes" => self.prototypes = parse_num(key, v)?,
            "enroll.metric" => self.metric = Metric::parse(v)?,
            "eval.train_fraction" => self.train_fraction = parse_num(key, v)?,
            "verify.threshold" => self.verify_threshold = parse_num(key, v)?,
            "synth.subjects" => self.synth.subjects = parse_num(key, v)?,
            "synth.sessions" => self.synth.sessions = parse_num(key, v)?,
            "synth.duration_secs" => self.synth.duration_secs = parse_num(key, v)?,
            "synth.sampling_rate" => self.synth.render.sampling_rate = parse_num(key, v)?,
            "synth.noise_scale" => self.synth.render.noise_scale = parse_num(key, v)?,
            "synth.jitter_scale" => self.synth.render.jitter_scale = parse_num(key, v)?,
            "synth.baseline_amplitude" => self.synth.render.baseline_amplitude = parse_num(key, v)?,
            "ingest.lead" => self.ingest.lead = parse_num(key, v)?,
            "ingest.csv_column" => self.ingest.csv_column = parse_num(key, v)?,
            "ingest.csv_rate" => self.ingest.csv_rate = parse_num(key, v)?,
            "ingest.csv_header" => self.ingest.csv_header = parse_bool(key, v)?,
            "ingest.id_pattern" => self.ingest.id_pattern = v.to_string(),
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let w = &self.windows;
        let m = &self.model;
        let t = &self.train;
        let s = &self.synth;
        vec![
            ("seed", self.seed.to_string()),
            ("prep.low_cut", format!("{:?}", self.prep.low_cut)),
            ("prep.high_cut", format!("{:?}", self.prep.high_cut)),
            ("prep.target_rate", format!("{:?}", self.prep.target_rate)),
            ("prep.filter_order", self.prep.filter_order.to_string()),
            ("windows.p", window_text(w.p)),
            ("windows.qrs", window_text(w.qrs)),
            ("windows.st", window_text(w.st)),
            ("windows.tu", window_text(w.tu)),
            ("model.embed_dim", m.embed_dim.to_string()),
            ("model.gabor_channels", m.gabor_channels.to_string()),
            ("model.kernel_len", m.kernel_len.to_string()),
            ("model.msfb_width", m.msfb_width.to_string()),
            ("model.fuse_channels", m.fuse_channels.to_string()),
            ("model.leaky_slope", format!("{:?}", m.leaky_slope)),
            ("model.ln_eps", format!("{:?}", m.ln_eps)),
            ("train.epochs", t.epochs.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.momentum", format!("{:?}", t.momentum)),
            ("train.base_lr", format!("{:?}", t.base_lr)),
            ("train.eta_min", format!("{:?}", t.eta_min)),
            ("train.margin", format!("{:?}", t.margin)),
            (
                "train.strict_paper_mining",
                t.strict_paper_mining.to_string(),
            ),
            ("train.warmup_epochs", t.warmup_epochs.to_string()),
            (
                "train.clip_norm",
                t.clip_norm.map_or("none".into(), |c| format!("{c:?}")),
            ),
            ("enroll.prototypes", self.prototypes.to_string()),
            ("enroll.metric", self.metric.name().to_string()),
            ("eval.train_fraction", format!("{:?}", self.train_fraction)),
            ("verify.threshold", format!("{:?}", self.verify_threshold)),
            ("synth.subjects", s.subjects.to_string()),
            ("synth.sessions", s.sessions.to_string()),
            ("synth.duration_secs", format!("{:?}", s.duration_secs)),
            (
                "synth.sampling_rate",
                format!("{:?}", s.render.sampling_rate),
            ),
            ("synth.noise_scale", format!("{:?}", s.render.noise_scale)),
            ("synth.jitter_scale", format!("{:?}", s.render.jitter_scale)),
            (
                "synth.baseline_amplitude",
                format!("{:?}", s.render.baseline_amplitude),
            ),
            ("ingest.lead", self.ingest.lead.to_string()),
            ("ingest.csv_column", self.ingest.csv_column.to_string()),
            ("ingest.csv_rate", format!("{:?}", self.ingest.csv_rate)),
            ("ingest.csv_header", self.ingest.csv_header.to_string()),
            ("ingest.id_pattern", self.ingest.id_pattern.clone()),
        ]
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Apply the lines of a config file. Blank lines and `#` comments are
    /// ignored; errors carry the 1-based line number.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("{origin}:{}: expected `key = value`", i + 1))
            })?;
            self.set(k.trim(), v)
                .map_err(|e| Error::Config(format!("{origin}:{}: {}", i + 1, strip(&e))))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = PipelineConfig::default();
        cfg.apply_text(&text, &path.display().to_string())?;
        Ok(cfg)
    }

    /// Apply one `key=value` override from the command line.
    pub fn apply_override(&mut self, item: &str) -> Result<()> {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects key=value, got {item:?}")))?;
        self.set(k.trim(), v)
    }

    /// Model settings with phase lengths taken from the windows.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            phase_lengths: self.windows.lengths(),
            ..self.model.clone()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: derive_seed(self.seed, "train"),
            ..self.train.clone()
        }
    }

    pub fn protocol(&self) -> ProtocolConfig {
        ProtocolConfig {
            model: self.model_config(),
            train: self.train_config(),
            prototypes: self.prototypes,
            metric: self.metric,
            train_fraction: self.train_fraction,
            seed: derive_seed(self.seed, "eval"),
        }
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            subjects: self.synth.subjects,
            sessions: self.synth.sessions,
            duration_secs: self.synth.duration_secs,
            seed: derive_seed(self.seed, "synth"),
        }
    }

    pub fn csv_options(&self) -> CsvOptions {
        CsvOptions {
            column: self.ingest.csv_column,
            sampling_rate: self.ingest.csv_rate,
            has_header: self.ingest.csv_header,
        }
    }

    pub fn id_pattern(&self) -> Result<IdPattern> {
        IdPattern::new(&self.ingest.id_pattern)
    }

    pub fn validate(&self) -> Result<()> {
        self.prep.validate()?;
        self.windows.validate()?;
        self.protocol().validate()?;
        if self.synth.duration_secs.is_nan() || self.synth.duration_secs < 2.0 {
            return Err(Error::Config(
                "synth.duration_secs must be at least 2".into(),
            ));
        }
        if self.synth.subjects == 0 || self.synth.sessions == 0 {
            return Err(Error::Config(
                "synth.subjects and synth.sessions must be positive".into(),
            ));
        }
        self.id_pattern()?;
        Ok(())
    }
}

fn strip(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = PipelineConfig::default();
        cfg.set("train.base_lr", "0.001").unwrap();
        cfg.set("windows.p", "-70, -20").unwrap();
        cfg.set("enroll.metric", "euclidean").unwrap();
        let mut back = PipelineConfig::default();
        back.apply_text(&cfg.to_text(), "test").unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn defaults_follow_the_method() {
        let cfg = PipelineConfig::default();
        assert_eq!(
            (cfg.prep.low_cut, cfg.prep.high_cut, cfg.prep.target_rate),
            (0.5, 40.0, 200.0)
        );
        assert_eq!(cfg.windows.lengths(), [60, 40, 60, 80]);
        assert_eq!((cfg.train.epochs, cfg.train.batch_size), (40, 32));
        assert_eq!((cfg.train.momentum, cfg.train.base_lr), (0.9, 1e-4));
        assert_eq!(cfg.prototypes, 3);
        cfg.validate().unwrap();
    }

    #[test]
    fn comments_and_blank_lines_are_skipped() {
        let mut cfg = PipelineConfig::default();
        cfg.apply_text("# header\n\nseed = 9  # trailing\n", "t")
            .unwrap();
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn unknown_key_names_the_line() {
        let mut cfg = PipelineConfig::default();
        let err = cfg
            .apply_text("seed = 1\nbogus = 2\n", "run.conf")
            .unwrap_err();
        assert!(err.is_config());
        assert!(err.to_string().contains("run.conf:2"), "{err}");
        assert!(err.to_string().contains("bogus"));
    }

    #[test]
    fn bad_values_are_config_errors() {
        let mut cfg = PipelineConfig::default();
        assert!(cfg.set("train.epochs", "many").unwrap_err().is_config());
        assert!(cfg.set("windows.qrs", "5").unwrap_err().is_config());
        assert!(cfg.apply_override("seed").unwrap_err().is_config());
    }

    #[test]
    fn module_seeds_are_distinct() {
        let cfg = PipelineConfig::default();
        let seeds = [
            cfg.train_config().seed,
            cfg.protocol().seed,
            cfg.dataset_spec().seed,
        ];
        assert!(seeds[0] != seeds[1] && seeds[1] != seeds[2] && seeds[0] != seeds[2]);
    }

    #[test]
    fn shipped_desk_config_uses_the_tiny_encoder() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.conf");
        let cfg = PipelineConfig::load(&path).unwrap();
        assert_eq!(cfg.model, ModelConfig::tiny());
        assert_eq!(cfg.train.clip_norm, Some(2.0));
        assert_eq!(cfg.train.warmup_epochs, 1);
    }
}
