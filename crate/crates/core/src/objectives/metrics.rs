use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Segment length of the segmental SNR, 16 ms at 16 kHz.
pub const SSNR_SEGMENT: usize = 256;
pub const SSNR_MIN_DB: f64 = -10.0;
pub const SSNR_MAX_DB: f64 = 35.0;
/// Reported SI-SDR when the estimate has no distortion left.
pub const SI_SDR_CAP_DB: f64 = 1e3;
const DISTORTION_FLOOR: f64 = 1e-30;

fn same_len(op: &str, reference: &[f64], est: &[f64]) -> Result<()> {
    if reference.len() != est.len() {
        return Err(Error::Audio(format!("{op}: reference has {} samples, estimate {}", reference.len(), est.len())));
    }
    Ok(())
}

/// Mean over non-overlapping 256-sample segments of the clamped per-segment SNR,
/// skipping segments whose reference is silent. A trailing partial segment is dropped.
pub fn ssnr(reference: &[f64], est: &[f64]) -> Result<f64> {
    same_len("ssnr", reference, est)?;
    if reference.len() < SSNR_SEGMENT {
        return Err(Error::Audio(format!("ssnr needs at least {SSNR_SEGMENT} samples, got {}", reference.len())));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (r, e) in reference.chunks_exact(SSNR_SEGMENT).zip(est.chunks_exact(SSNR_SEGMENT)) {
        let sig: f64 = r.iter().map(|v| v * v).sum();
        if sig == 0.0 {
            continue;
        }
        let err: f64 = r.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum();
        let db = if err == 0.0 { SSNR_MAX_DB } else { 10.0 * (sig / err).log10() };
        sum += db.clamp(SSNR_MIN_DB, SSNR_MAX_DB);
        count += 1;
    }
    if count == 0 {
        return Err(Error::Audio("ssnr: every reference segment is silent".into()));
    }
    Ok(sum / count as f64)
}

/// Scale-invariant SDR: the estimate is projected onto the reference and the
/// projection's energy compared with the residual's.
pub fn si_sdr(reference: &[f64], est: &[f64]) -> Result<f64> {
    same_len("si_sdr", reference, est)?;
    let rr: f64 = reference.iter().map(|v| v * v).sum();
    if rr == 0.0 {
        return Err(Error::Audio("si_sdr: zero reference".into()));
    }
    let alpha = reference.iter().zip(est).map(|(r, e)| r * e).sum::<f64>() / rr;
    let (mut ss, mut ee) = (0.0, 0.0);
    for (r, e) in reference.iter().zip(est) {
        let s = alpha * r;
        ss += s * s;
        ee += (e - s) * (e - s);
    }
    if ee < DISTORTION_FLOOR {
        return Ok(SI_SDR_CAP_DB);
    }
    if ss == 0.0 {
        return Ok(-SI_SDR_CAP_DB);
    }
    Ok((10.0 * (ss / ee).log10()).clamp(-SI_SDR_CAP_DB, SI_SDR_CAP_DB))
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct FileMetrics {
    pub path: String,
    pub ssnr_db: f64,
    pub si_sdr_db: f64,
}

/// Per-file scores and their aggregates.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub files: Vec<FileMetrics>,
}

impl MetricReport {
    pub fn push(&mut self, path: impl Into<String>, reference: &[f64], est: &[f64]) -> Result<()> {
        let m = FileMetrics { path: path.into(), ssnr_db: ssnr(reference, est)?, si_sdr_db: si_sdr(reference, est)? };
        self.files.push(m);
        Ok(())
    }

    pub fn ssnr(&self) -> (f64, f64) {
        mean_std(&self.files.iter().map(|f| f.ssnr_db).collect::<Vec<_>>())
    }

    pub fn si_sdr(&self) -> (f64, f64) {
        mean_std(&self.files.iter().map(|f| f.si_sdr_db).collect::<Vec<_>>())
    }

    /// `path<TAB>ssnr<TAB>si_sdr` per file, then one `#aggregate` line per metric.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for f in &self.files {
            let _ = writeln!(s, "{}\t{:.4}\t{:.4}", f.path, f.ssnr_db, f.si_sdr_db);
        }
        let (sm, ss) = self.ssnr();
        let (im, is) = self.si_sdr();
        let _ = writeln!(s, "#aggregate\tssnr\t{sm:.4}±{ss:.4}");
        let _ = writeln!(s, "#aggregate\tsi_sdr\t{im:.4}±{is:.4}");
        s
    }
}
