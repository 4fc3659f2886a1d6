//! CSV persistence and report emission. Every file is a pure function of its
//! inputs, so reruns with one config reproduce them byte for byte.

use std::fs;
use std::path::{Path, PathBuf};

use super::grid::{AttackReport, Evaluation, Metric, SummaryTable, SweepPoint};
use super::plots::{bar_chart, line_plot, Series};
use crate::attacks::AttackSpec;
use crate::error::{LabError, Result};
use crate::metrics::{format_metric, DecodeMetrics, FidelityMetrics};
use crate::theory::{DpiReport, MiCurve, MiVariant};

pub const ATTACK_REPORT_FILE: &str = "attack_report.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const MI_FILE: &str = "mi_curve.csv";
pub const DPI_FILE: &str = "dpi.csv";

pub const ATTACK_COLUMNS: [&str; 13] = [
    "image_id",
    "codec",
    "attack",
    "param_json",
    "bit_acc",
    "ber",
    "success",
    "psnr_vs_wm",
    "ssim_vs_wm",
    "psnr_vs_orig",
    "ssim_vs_orig",
    "t_frac",
    "one_minus_alpha_bar",
];
pub const SWEEP_COLUMNS: [&str; 9] =
    ["codec", "attack", "strength", "t_frac", "one_minus_alpha_bar", "bit_acc", "success", "psnr_vs_wm", "ssim_vs_wm"];
pub const MI_COLUMNS: [&str; 5] = ["t", "alpha_bar", "snr", "mi_bits", "variant"];

/// Whatever a run produced; absent parts are skipped.
#[derive(Debug, Clone, Default)]
pub struct ReportBundle {
    pub evaluation: Option<Evaluation>,
    pub sweep: Vec<SweepPoint>,
    pub mi_curves: Vec<MiCurve>,
    pub dpi: Option<DpiReport>,
}

fn optional(v: Option<f64>) -> String {
    v.map(format_metric).unwrap_or_default()
}

/// Shortest round-trip decimal; used where six decimals would lose the
/// small values near the end of the schedule.
fn exact(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else {
        format_metric(v)
    }
}

fn to_csv(header: &[&str], records: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in records {
        w.write_record(&r)?;
    }
    w.into_inner().map_err(|e| LabError::Io(e.into_error()))
}

pub fn attack_rows_csv(rows: &[AttackReport]) -> Result<Vec<u8>> {
    to_csv(
        &ATTACK_COLUMNS,
        rows.iter().map(|r| {
            vec![
                r.image_id.clone(),
                r.codec.clone(),
                r.attack.kind().to_string(),
                r.attack.params_json(),
                format_metric(r.decode.bit_accuracy),
                format_metric(r.decode.ber),
                u8::from(r.decode.payload_success).to_string(),
                format_metric(r.vs_watermarked.psnr_db),
                format_metric(r.vs_watermarked.ssim),
                format_metric(r.vs_original.psnr_db),
                format_metric(r.vs_original.ssim),
                optional(r.t_frac),
                optional(r.one_minus_alpha_bar),
            ]
        }),
    )
}

/// One line per (codec, metric), one column per attack.
pub fn summary_csv(summary: &SummaryTable) -> Result<Vec<u8>> {
    let mut header = vec!["codec", "metric"];
    header.extend(summary.columns.iter().map(String::as_str));
    let mut records = Vec::new();
    for (c, codec) in summary.codecs.iter().enumerate() {
        for (m, metric) in Metric::ALL.iter().enumerate() {
            let mut rec = vec![codec.clone(), metric.as_str().to_string()];
            rec.extend(summary.cells[c].iter().map(|cell| format_metric(cell[m])));
            records.push(rec);
        }
    }
    to_csv(&header, records)
}

pub fn sweep_csv(points: &[SweepPoint]) -> Result<Vec<u8>> {
    to_csv(
        &SWEEP_COLUMNS,
        points.iter().map(|p| {
            vec![
                p.codec.clone(),
                p.attack.clone(),
                format_metric(p.strength),
                format_metric(p.t_frac),
                format_metric(p.one_minus_alpha_bar),
                format_metric(p.bit_acc),
                format_metric(p.success),
                format_metric(p.psnr_vs_wm),
                format_metric(p.ssim_vs_wm),
            ]
        }),
    )
}

pub fn mi_csv(curves: &[MiCurve]) -> Result<Vec<u8>> {
    let records = curves.iter().flat_map(|c| {
        (0..c.timesteps.len()).map(move |i| {
            vec![
                c.timesteps[i].to_string(),
                exact(c.alpha_bars[i]),
                exact(c.snrs[i]),
                exact(c.mi_bits[i]),
                c.variant.as_str().to_string(),
            ]
        })
    });
    to_csv(&MI_COLUMNS, records)
}

pub fn dpi_csv(dpi: &DpiReport) -> Result<Vec<u8>> {
    to_csv(
        &["strength", "t", "alpha_bar", "analytic_bits", "empirical_bits", "epsilon", "holds"],
        dpi.points.iter().map(|p| {
            vec![
                format_metric(p.strength),
                p.timestep.to_string(),
                exact(p.alpha_bar),
                exact(p.analytic_bits),
                exact(p.empirical_bits),
                format_metric(dpi.epsilon),
                u8::from(p.holds).to_string(),
            ]
        }),
    )
}

fn parse_f64(s: &str, what: &str) -> Result<f64> {
    s.trim().parse().map_err(|_| LabError::Config(format!("bad {what} value {s:?}")))
}

fn parse_opt(s: &str, what: &str) -> Result<Option<f64>> {
    if s.is_empty() {
        Ok(None)
    } else {
        parse_f64(s, what).map(Some)
    }
}

fn reader(path: &Path, expected: &[&str]) -> Result<csv::Reader<fs::File>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != expected {
        return Err(LabError::Config(format!("{}: unexpected columns {header:?}", path.display())));
    }
    Ok(r)
}

fn attack_from(kind: &str, params_json: &str) -> Result<AttackSpec> {
    let mut params: serde_json::Map<String, serde_json::Value> = serde_json::from_str(params_json)?;
    params.insert("kind".into(), serde_json::Value::String(kind.to_string()));
    Ok(serde_json::from_value(serde_json::Value::Object(params))?)
}

pub fn read_attack_rows(path: &Path) -> Result<Vec<AttackReport>> {
    let mut rows = Vec::new();
    for rec in reader(path, &ATTACK_COLUMNS)?.records() {
        let rec = rec?;
        let f = |i: usize| parse_f64(&rec[i], ATTACK_COLUMNS[i]);
        rows.push(AttackReport {
            image_id: rec[0].to_string(),
            codec: rec[1].to_string(),
            attack: attack_from(&rec[2], &rec[3])?,
            decode: DecodeMetrics { bit_accuracy: f(4)?, ber: f(5)?, payload_success: &rec[6] == "1" },
            vs_watermarked: FidelityMetrics { psnr_db: f(7)?, ssim: f(8)? },
            vs_original: FidelityMetrics { psnr_db: f(9)?, ssim: f(10)? },
            t_frac: parse_opt(&rec[11], "t_frac")?,
            one_minus_alpha_bar: parse_opt(&rec[12], "one_minus_alpha_bar")?,
        });
    }
    Ok(rows)
}

pub fn read_sweep(path: &Path) -> Result<Vec<SweepPoint>> {
    let mut points = Vec::new();
    for rec in reader(path, &SWEEP_COLUMNS)?.records() {
        let rec = rec?;
        let f = |i: usize| parse_f64(&rec[i], SWEEP_COLUMNS[i]);
        points.push(SweepPoint {
            codec: rec[0].to_string(),
            attack: rec[1].to_string(),
            strength: f(2)?,
            t_frac: f(3)?,
            one_minus_alpha_bar: f(4)?,
            bit_acc: f(5)?,
            success: f(6)?,
            psnr_vs_wm: f(7)?,
            ssim_vs_wm: f(8)?,
        });
    }
    Ok(points)
}

pub fn read_mi_curves(path: &Path) -> Result<Vec<MiCurve>> {
    let mut curves: Vec<MiCurve> = Vec::new();
    for rec in reader(path, &MI_COLUMNS)?.records() {
        let rec = rec?;
        let variant = match &rec[4] {
            "analytic" => MiVariant::Analytic,
            "empirical_plugin" => MiVariant::EmpiricalPlugin,
            other => return Err(LabError::Config(format!("unknown MI variant {other:?}"))),
        };
        if curves.last().map(|c| c.variant) != Some(variant) {
            curves.push(MiCurve { variant, timesteps: vec![], alpha_bars: vec![], snrs: vec![], mi_bits: vec![] });
        }
        let c = curves.last_mut().expect("pushed above");
        c.timesteps.push(rec[0].parse().map_err(|_| LabError::Config(format!("bad timestep {:?}", &rec[0])))?);
        c.alpha_bars.push(parse_f64(&rec[1], "alpha_bar")?);
        c.snrs.push(parse_f64(&rec[2], "snr")?);
        c.mi_bits.push(parse_f64(&rec[3], "mi_bits")?);
    }
    Ok(curves)
}

fn write(out: &Path, name: &str, bytes: &[u8], written: &mut Vec<PathBuf>) -> Result<()> {
    let path = out.join(name);
    fs::write(&path, bytes)?;
    written.push(path);
    Ok(())
}

/// Writes the CSVs and plots for every part of `bundle` into `out`.
pub fn emit_report(bundle: &ReportBundle, out: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out)?;
    let mut written = Vec::new();
    if let Some(eval) = &bundle.evaluation {
        write(out, ATTACK_REPORT_FILE, &attack_rows_csv(&eval.rows)?, &mut written)?;
        write(out, SUMMARY_FILE, &summary_csv(&eval.summary)?, &mut written)?;
        let s = &eval.summary;
        let groups: Vec<(String, Vec<f64>)> =
            s.codecs.iter().enumerate().map(|(c, name)| (name.clone(), s.cells[c].iter().map(|cell| cell[0]).collect())).collect();
        let path = out.join("summary_bit_accuracy.svg");
        bar_chart(&path, "Bit accuracy per attack", "bit accuracy", &s.columns, &groups)?;
        written.push(path);
    }
    if !bundle.sweep.is_empty() {
        write(out, SWEEP_FILE, &sweep_csv(&bundle.sweep)?, &mut written)?;
        for (file, title, y_label, value) in [
            ("accuracy_vs_strength.svg", "Bit accuracy vs diffusion strength", "bit accuracy", (|p: &SweepPoint| p.bit_acc) as fn(&SweepPoint) -> f64),
            ("psnr_vs_strength.svg", "PSNR to the watermarked image vs strength", "PSNR (dB)", |p: &SweepPoint| p.psnr_vs_wm),
        ] {
            let path = out.join(file);
            line_plot(&path, title, "strength t/T", y_label, &sweep_series(&bundle.sweep, value))?;
            written.push(path);
        }
    }
    if !bundle.mi_curves.is_empty() {
        write(out, MI_FILE, &mi_csv(&bundle.mi_curves)?, &mut written)?;
        let series: Vec<Series> = bundle
            .mi_curves
            .iter()
            .map(|c| Series {
                name: c.variant.as_str().to_string(),
                points: c.timesteps.iter().zip(&c.mi_bits).map(|(t, m)| (*t as f64, *m)).collect(),
                markers: c.variant == MiVariant::EmpiricalPlugin,
            })
            .collect();
        let path = out.join("mi_vs_t.svg");
        line_plot(&path, "Watermark MI per bit vs timestep", "t", "MI (bits)", &series)?;
        written.push(path);
    }
    if let Some(dpi) = &bundle.dpi {
        write(out, DPI_FILE, &dpi_csv(dpi)?, &mut written)?;
    }
    Ok(written)
}

fn sweep_series(points: &[SweepPoint], value: fn(&SweepPoint) -> f64) -> Vec<Series> {
    let mut series: Vec<Series> = Vec::new();
    for p in points {
        let name = format!("{} {}", p.codec, p.attack);
        let idx = match series.iter().position(|s| s.name == name) {
            Some(i) => i,
            None => {
                series.push(Series { name, points: Vec::new(), markers: false });
                series.len() - 1
            }
        };
        series[idx].points.push((p.strength, value(p)));
    }
    series
}
