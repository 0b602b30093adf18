//! One-axis sweeps: pretrain per value, probe, and tabulate.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use crate::cluster::cluster_grid_for;
use crate::config::Config;
use crate::data::load_dataset;
use crate::error::{at_path, config_err, Error, Result};
use crate::eval::{linear_probe, ProbeConfig};
use crate::train::{run_pretraining, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationAxis {
    Clusters,
    DecoderDepth,
    DecoderDim,
    DisMode,
    Paradigm,
    Teacher,
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clusters" => Ok(Self::Clusters),
            "decoder_depth" => Ok(Self::DecoderDepth),
            "decoder_dim" => Ok(Self::DecoderDim),
            "dis_mode" => Ok(Self::DisMode),
            "paradigm" => Ok(Self::Paradigm),
            "teacher" => Ok(Self::Teacher),
            other => config_err(format!(
                "unknown ablation axis `{other}` (clusters|decoder_depth|decoder_dim|dis_mode|paradigm|teacher)"
            )),
        }
    }
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Clusters => "clusters",
            Self::DecoderDepth => "decoder_depth",
            Self::DecoderDim => "decoder_dim",
            Self::DisMode => "dis_mode",
            Self::Paradigm => "paradigm",
            Self::Teacher => "teacher",
        })
    }
}

/// Config overrides for one swept value. Cluster counts become the grid
/// chosen by [`cluster_grid_for`]; teacher values are `kind` or `kind:path`.
pub fn axis_overrides(axis: AblationAxis, value: &str) -> Result<Vec<(&'static str, String)>> {
    Ok(match axis {
        AblationAxis::Clusters => {
            let n: usize = value
                .parse()
                .map_err(|_| Error::Config(format!("clusters: `{value}` is not a cluster count")))?;
            let (r, c) = cluster_grid_for(n)?;
            vec![("clusters.rows", r.to_string()), ("clusters.cols", c.to_string())]
        }
        AblationAxis::DecoderDepth => vec![("decoder.depth", value.to_string())],
        AblationAxis::DecoderDim => vec![("decoder.dim", value.to_string())],
        AblationAxis::DisMode => vec![("loss.dis_mode", value.to_string())],
        AblationAxis::Paradigm => vec![("paradigm", value.to_string())],
        AblationAxis::Teacher => match value.split_once(':') {
            Some((kind, path)) => vec![("teacher.kind", kind.to_string()), ("teacher.path", path.to_string())],
            None => vec![("teacher.kind", value.to_string())],
        },
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub axis: AblationAxis,
    pub value: String,
    pub num_clusters: usize,
    /// Cluster height x width in pixels.
    pub cluster_shape: String,
    /// Keys whose values differ from the base config.
    pub changed_keys: Vec<&'static str>,
    pub config_hash: String,
    pub steps: u64,
    pub loss_total: f64,
    pub loss_gen: f64,
    pub loss_dis: f64,
    pub probe_top1: Option<f64>,
    pub diverged: bool,
    pub error: String,
}

pub const CSV_HEADER: &str = "axis,value,num_clusters,cluster_shape,changed_keys,config_hash,steps,loss_total,loss_gen,loss_dis,probe_top1,diverged,error";

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl AblationRow {
    pub fn csv_line(&self) -> String {
        let fields = [
            self.axis.to_string(),
            self.value.clone(),
            self.num_clusters.to_string(),
            self.cluster_shape.clone(),
            self.changed_keys.join(";"),
            self.config_hash.clone(),
            self.steps.to_string(),
            self.loss_total.to_string(),
            self.loss_gen.to_string(),
            self.loss_dis.to_string(),
            self.probe_top1.map(|a| a.to_string()).unwrap_or_default(),
            self.diverged.to_string(),
            self.error.clone(),
        ];
        fields.iter().map(|f| csv_field(f)).collect::<Vec<_>>().join(",")
    }
}

pub fn write_csv(rows: &[AblationRow], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(at_path(path, std::fs::File::create(path))?);
    writeln!(f, "{CSV_HEADER}")?;
    for r in rows {
        writeln!(f, "{}", r.csv_line())?;
    }
    f.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationOptions {
    /// Skip the linear probe after each run.
    pub skip_probe: bool,
}

/// Pretrains once per value (sequentially, each under
/// `<train.out_dir>/<axis>-<value>`) and probes the result. A run that
/// diverges or fails still produces a row, flagged with its error; bad axis
/// values are rejected before anything runs.
pub fn run_ablation(
    axis: AblationAxis,
    values: &[String],
    base: &Config,
    options: &AblationOptions,
) -> Result<Vec<AblationRow>> {
    if values.is_empty() {
        return config_err(format!("ablation over {axis} needs at least one value"));
    }
    let mut configs = Vec::with_capacity(values.len());
    let base_out = base.string("train.out_dir").to_string();
    for v in values {
        let mut cfg = base.clone();
        for (k, val) in axis_overrides(axis, v)? {
            cfg.apply_override(&format!("{k}={val}"))?;
        }
        cfg.validate()?;
        let changed = cfg.diff(base);
        let dir = Path::new(&base_out).join(format!("{axis}-{}", v.replace(['/', ':'], "_")));
        cfg.apply_override(&format!("train.out_dir={}", dir.display()))?;
        configs.push((v.clone(), cfg, changed));
    }

    let dataset = load_dataset(base.string("data.root"), base.usize("data.image_size")?)?;
    let mut rows = Vec::new();
    for (value, cfg, changed) in configs {
        let tc = TrainConfig::from_config(&cfg)?;
        let layout = tc.layout()?;
        let (ch, cw) = layout.cluster_pixel_dims();
        let mut row = AblationRow {
            axis,
            value,
            num_clusters: layout.num_clusters(),
            cluster_shape: format!("{ch}x{cw}"),
            changed_keys: changed,
            config_hash: cfg.hash(),
            steps: 0,
            loss_total: f64::NAN,
            loss_gen: f64::NAN,
            loss_dis: f64::NAN,
            probe_top1: None,
            diverged: false,
            error: String::new(),
        };
        log::info!("ablation {axis}={}: training", row.value);
        match run_pretraining(&tc) {
            Ok(outcome) => {
                row.steps = outcome.steps;
                if let Some(l) = outcome.last {
                    row.loss_total = l.loss_total;
                    row.loss_gen = l.loss_gen;
                    row.loss_dis = l.loss_dis;
                }
                if !options.skip_probe {
                    let probe = ProbeConfig::from_config(&cfg)?;
                    let r = linear_probe(
                        &outcome.model.encoder,
                        &dataset,
                        tc.model.patch_size,
                        &probe,
                        base.string("data.root"),
                        &row.config_hash,
                    )?;
                    row.probe_top1 = Some(r.top1);
                }
            }
            Err(e) => {
                row.diverged = matches!(e, Error::NonFinite(_));
                row.error = e.to_string();
            }
        }
        rows.push(row);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_names_roundtrip() {
        for a in [
            "clusters",
            "decoder_depth",
            "decoder_dim",
            "dis_mode",
            "paradigm",
            "teacher",
        ] {
            assert_eq!(a.parse::<AblationAxis>().unwrap().to_string(), a);
        }
        assert!("foo".parse::<AblationAxis>().is_err());
    }

    #[test]
    fn cluster_overrides_follow_grid_rule() {
        let o = axis_overrides(AblationAxis::Clusters, "2").unwrap();
        assert_eq!(
            o,
            vec![("clusters.rows", "1".to_string()), ("clusters.cols", "2".to_string())]
        );
        assert!(axis_overrides(AblationAxis::Clusters, "x").is_err());
        let t = axis_overrides(AblationAxis::Teacher, "cache:/tmp/f.bin").unwrap();
        assert_eq!(t[1], ("teacher.path", "/tmp/f.bin".to_string()));
    }

    #[test]
    fn csv_quotes_fields() {
        assert_eq!(csv_field("a,b"), "\"a,b\"");
        assert_eq!(csv_field("say \"x\""), "\"say \"\"x\"\"\"");
        assert_eq!(CSV_HEADER.split(',').count(), 13);
    }
}
