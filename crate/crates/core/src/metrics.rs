//! Objective evaluation of converted audio.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoders::{cosine, Encoders};
use crate::error::{Error, Result};
use crate::rl::{error_rate, AestheticScorer, SpeakerEmbedder, TokenLevel, Transcriber};
use crate::signal::{load_wav, F0Contour, Waveform};

/// Pearson correlation of log-F0 over frames voiced in both contours, in
/// percent. `b` is nearest-neighbour resampled to `a`'s length if needed.
pub fn logf0_pcc(a: &F0Contour, b: &F0Contour) -> Result<f64> {
    let b = if b.len() == a.len() { b.clone() } else { b.resampled(a.len()) };
    let pairs: Vec<(f64, f64)> = (0..a.len())
        .filter(|&i| a.voiced()[i] && b.voiced()[i])
        .map(|i| (a.hz()[i].ln(), b.hz()[i].ln()))
        .collect();
    if pairs.len() < 2 {
        return Err(Error::invalid(format!("{} co-voiced frames; need at least 2", pairs.len())));
    }
    let n = pairs.len() as f64;
    let (ma, mb) = pairs.iter().fold((0.0, 0.0), |(x, y), (a, b)| (x + a / n, y + b / n));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (a, b) in &pairs {
        sab += (a - ma) * (b - mb);
        saa += (a - ma) * (a - ma);
        sbb += (b - mb) * (b - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::invalid("log-F0 correlation undefined for a flat contour"));
    }
    Ok((100.0 * sab / (saa * sbb).sqrt()).clamp(-100.0, 100.0))
}

/// Raw cosine between speaker embeddings, in `[-1, 1]`.
pub fn speaker_similarity(gen: &Waveform, reference: &Waveform, embedder: &dyn SpeakerEmbedder) -> Result<f64> {
    cosine(&embedder.embed(gen)?, &embedder.embed(reference)?)
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub id: String,
    pub src: String,
    #[serde(rename = "ref")]
    pub reference: String,
    pub conv: String,
    #[serde(default)]
    pub text: Option<String>,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    rdr.deserialize()
        .map(|r| r.map_err(|e| Error::invalid(format!("{}: {e}", path.display()))))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spk_sim: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub logf0pcc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cer: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub aesthetics: Option<(f64, f64)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub spk_sim: Option<f64>,
    pub logf0pcc: Option<f64>,
    pub cer: Option<f64>,
    pub aesthetics: Option<(f64, f64)>,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

impl EvalReport {
    pub fn from_rows(rows: Vec<EvalRow>) -> Self {
        let aes = mean(rows.iter().filter_map(|r| r.aesthetics.map(|a| a.0)))
            .zip(mean(rows.iter().filter_map(|r| r.aesthetics.map(|a| a.1))));
        Self {
            spk_sim: mean(rows.iter().filter_map(|r| r.spk_sim)),
            logf0pcc: mean(rows.iter().filter_map(|r| r.logf0pcc)),
            cer: mean(rows.iter().filter_map(|r| r.cer)),
            aesthetics: aes,
            rows,
        }
    }

    pub fn scored(&self) -> usize {
        self.rows.iter().filter(|r| r.error.is_none()).count()
    }

    /// One JSON object per row.
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.rows {
            s.push_str(&serde_json::to_string(r).expect("rows serialise"));
            s.push('\n');
        }
        s
    }

    pub fn summary_table(&self) -> String {
        let cell = |v: Option<f64>, prec: usize| v.map_or("-".to_string(), |x| format!("{x:.prec$}"));
        let mut s = String::new();
        let _ = writeln!(s, "{:<24} {:>8} {:>9} {:>7} {:>13}", "id", "SPK-SIM", "LogF0PCC", "CER", "CE/CU");
        for r in &self.rows {
            if let Some(e) = &r.error {
                let _ = writeln!(s, "{:<24} error: {e}", r.id);
                continue;
            }
            let aes = r.aesthetics.map_or("-".into(), |(a, b)| format!("{a:.2}/{b:.2}"));
            let _ = writeln!(
                s,
                "{:<24} {:>8} {:>9} {:>7} {:>13}",
                r.id,
                cell(r.spk_sim, 4),
                cell(r.logf0pcc, 2),
                cell(r.cer, 2),
                aes
            );
        }
        let aes = self.aesthetics.map_or("-".into(), |(a, b)| format!("{a:.2}/{b:.2}"));
        let _ = writeln!(
            s,
            "{:<24} {:>8} {:>9} {:>7} {:>13}",
            format!("mean ({} scored)", self.scored()),
            cell(self.spk_sim, 4),
            cell(self.logf0pcc, 2),
            cell(self.cer, 2),
            aes
        );
        s
    }
}

/// Scorers available to [`evaluate`]. CER and aesthetics columns stay empty
/// unless the corresponding external scorer is supplied.
pub struct EvalContext<'a> {
    pub encoders: &'a Encoders,
    pub transcriber: Option<&'a dyn Transcriber>,
    pub aesthetic: Option<&'a dyn AestheticScorer>,
    pub token_level: TokenLevel,
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn score_row(row: &ManifestRow, base: &Path, converted_dir: &Path, ctx: &EvalContext<'_>) -> Result<EvalRow> {
    let src = load_wav(resolve(base, &row.src))?;
    let reference = load_wav(resolve(base, &row.reference))?;
    let conv = load_wav(resolve(converted_dir, &row.conv))?;
    let spk = speaker_similarity(&conv, &reference, &ctx.encoders.timbre)?;
    // Melody comes from the source, so the converted contour is compared
    // against the source contour.
    let pcc = logf0_pcc(&ctx.encoders.f0(&src)?, &ctx.encoders.f0(&conv)?).ok();
    let cer = match (ctx.transcriber, &row.text) {
        (Some(asr), Some(text)) if !text.is_empty() => {
            Some(100.0 * error_rate(text, &asr.transcribe(&conv)?, ctx.token_level))
        }
        _ => None,
    };
    let aesthetics = ctx.aesthetic.map(|s| s.score(&conv)).transpose()?;
    Ok(EvalRow {
        id: row.id.clone(),
        spk_sim: Some(spk),
        logf0pcc: pcc,
        cer,
        aesthetics,
        error: None,
    })
}

/// Score every manifest row; rows that fail are reported, not fatal.
pub fn evaluate(manifest: &Path, converted_dir: &Path, ctx: &EvalContext<'_>) -> Result<EvalReport> {
    if !converted_dir.is_dir() {
        return Err(Error::invalid(format!(
            "converted directory {} does not exist",
            converted_dir.display()
        )));
    }
    let base = manifest.parent().unwrap_or(Path::new("."));
    let rows = read_manifest(manifest)?
        .iter()
        .map(|row| {
            score_row(row, base, converted_dir, ctx).unwrap_or_else(|e| EvalRow {
                id: row.id.clone(),
                spk_sim: None,
                logf0pcc: None,
                cer: None,
                aesthetics: None,
                error: Some(e.to_string()),
            })
        })
        .collect();
    Ok(EvalReport::from_rows(rows))
}
