use crate::error::{Error, Result};

/// Metrics of one experiment arm.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmMetrics {
    pub arm: String,
    pub fid_desk: f64,
    pub perceptual_proxy: f64,
    pub trainable_fraction: f64,
    pub wall_seconds: f64,
    pub seed: u64,
    pub encoder_checksum: String,
}

pub const REPORT_CSV_HEADER: &str =
    "arm,fid_desk,perceptual_proxy,trainable_fraction,wall_seconds,seed,encoder_checksum";

/// Comparison table over arms, sorted by ascending FID.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub arms: Vec<ArmMetrics>,
}

impl MetricsReport {
    pub fn new(mut arms: Vec<ArmMetrics>) -> Result<Self> {
        if arms.is_empty() {
            return Err(Error::InvalidArgument("report needs at least one arm".into()));
        }
        arms.sort_by(|a, b| a.fid_desk.total_cmp(&b.fid_desk));
        Ok(Self { arms })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(REPORT_CSV_HEADER);
        out.push('\n');
        for a in &self.arms {
            out.push_str(&format!(
                "{},{:?},{:?},{:?},{:?},{},{}\n",
                a.arm,
                a.fid_desk,
                a.perceptual_proxy,
                a.trainable_fraction,
                a.wall_seconds,
                a.seed,
                a.encoder_checksum
            ));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h == REPORT_CSV_HEADER => {}
            other => {
                return Err(Error::InvalidArgument(format!(
                    "bad report header: {other:?}"
                )))
            }
        }
        let mut arms = Vec::new();
        for line in lines {
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(Error::InvalidArgument(format!("bad report row: {line}")));
            }
            let num = |s: &str| -> Result<f64> {
                s.parse()
                    .map_err(|_| Error::InvalidArgument(format!("bad number `{s}`")))
            };
            arms.push(ArmMetrics {
                arm: f[0].to_string(),
                fid_desk: num(f[1])?,
                perceptual_proxy: num(f[2])?,
                trainable_fraction: num(f[3])?,
                wall_seconds: num(f[4])?,
                seed: f[5]
                    .parse()
                    .map_err(|_| Error::InvalidArgument(format!("bad seed `{}`", f[5])))?,
                encoder_checksum: f[6].to_string(),
            });
        }
        Ok(Self { arms })
    }

    /// Aligned text table for terminal output.
    pub fn to_text_table(&self) -> String {
        let name_w = self
            .arms
            .iter()
            .map(|a| a.arm.len())
            .chain(["arm".len()])
            .max()
            .unwrap_or(3);
        let mut out = format!(
            "{:<name_w$}  {:>10}  {:>10}  {:>9}  {:>9}  {:>6}  {}\n",
            "arm", "fid_desk", "proxy", "frac", "wall_s", "seed", "encoder"
        );
        for a in &self.arms {
            out.push_str(&format!(
                "{:<name_w$}  {:>10.4}  {:>10.5}  {:>9.5}  {:>9.1}  {:>6}  {}\n",
                a.arm,
                a.fid_desk,
                a.perceptual_proxy,
                a.trainable_fraction,
                a.wall_seconds,
                a.seed,
                a.encoder_checksum
            ));
        }
        out
    }
}
