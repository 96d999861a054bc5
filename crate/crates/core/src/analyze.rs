// SPDX-License-Identifier: MIT OR Apache-2.0

//! Generation-behaviour diagnostics: CHAIR, EOS margin, Zipf fit and
//! cumulative probability mass.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{MesaError, Result};
use crate::model::{teacher_forced_logits, GenerationTrace, InjectionSpec, ModelParams};
use crate::tensor::{rank_descending, softmax, Matrix};
use crate::world::{Scene, TokenId, Vocabulary};

/// Object-hallucination statistics over a caption set.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ChairReport {
    pub chair_s: f64,
    pub chair_i: f64,
    pub recall: f64,
    pub avg_length: f64,
    pub captions: usize,
    pub sentences: usize,
    pub hallucinated_sentences: usize,
    pub mentioned_objects: usize,
    pub hallucinated_objects: usize,
    pub scene_objects: usize,
    pub recalled_objects: usize,
    /// Hallucination count per object name.
    pub per_object: BTreeMap<String, usize>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// CHAIR over the content of each trace.
pub fn chair_metrics(traces: &[GenerationTrace], scenes: &[Scene], vocab: &Vocabulary) -> Result<ChairReport> {
    let captions: Vec<&[TokenId]> = traces.iter().map(|t| t.content()).collect();
    chair_from_captions(&captions, scenes, vocab)
}

/// CHAIR over raw token sequences.
///
/// A sentence ends at each period; a non-empty tail without a period counts
/// as a sentence too. CHAIR_I and recall count distinct objects per caption.
pub fn chair_from_captions(captions: &[&[TokenId]], scenes: &[Scene], vocab: &Vocabulary) -> Result<ChairReport> {
    if captions.len() != scenes.len() {
        return Err(MesaError::input(format!(
            "{} captions but {} scenes",
            captions.len(),
            scenes.len()
        )));
    }
    let mut r = ChairReport {
        captions: captions.len(),
        ..Default::default()
    };
    let mut total_len = 0usize;
    for (caption, scene) in captions.iter().zip(scenes) {
        total_len += caption.len();
        let truth: BTreeSet<usize> = scene.objects.iter().copied().collect();
        let mut mentioned = BTreeSet::new();
        for sentence in caption.split(|&t| t == vocab.period()).filter(|s| !s.is_empty()) {
            r.sentences += 1;
            let mut bad = false;
            for cls in sentence.iter().filter_map(|&t| vocab.object_class(t)) {
                mentioned.insert(cls);
                bad |= !truth.contains(&cls);
            }
            r.hallucinated_sentences += bad as usize;
        }
        r.mentioned_objects += mentioned.len();
        for &cls in &mentioned {
            if truth.contains(&cls) {
                r.recalled_objects += 1;
            } else {
                r.hallucinated_objects += 1;
                *r.per_object
                    .entry(vocab.token(vocab.object_token(cls)).to_string())
                    .or_default() += 1;
            }
        }
        r.scene_objects += truth.len();
    }
    r.chair_s = ratio(r.hallucinated_sentences, r.sentences);
    r.chair_i = ratio(r.hallucinated_objects, r.mentioned_objects);
    r.recall = ratio(r.recalled_objects, r.scene_objects);
    r.avg_length = ratio(total_len, captions.len());
    Ok(r)
}

/// Best non-EOS logit minus the EOS logit.
pub fn eos_margin(logits: &[f64], eos: TokenId) -> f64 {
    let best = logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != eos as usize)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    best - logits[eos as usize]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EosMarginSeries {
    pub condition: String,
    pub margins: Vec<f64>,
}

/// EOS margin at each step of a forced `prompt ‖ continuation` sequence.
pub fn eos_margin_series(
    params: &ModelParams,
    visual: &Matrix,
    sequence: &[TokenId],
    prompt_len: usize,
    injection: Option<&InjectionSpec>,
    eos: TokenId,
    condition: &str,
) -> Result<EosMarginSeries> {
    let logits = teacher_forced_logits(params, visual, sequence, prompt_len, injection)?;
    Ok(EosMarginSeries {
        condition: condition.to_string(),
        margins: logits.rows_iter().map(|l| eos_margin(l, eos)).collect(),
    })
}

/// Mean over all steps of `|a − b|`.
pub fn eos_margin_mad(a: &[EosMarginSeries], b: &[EosMarginSeries]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(MesaError::input("margin series sets differ in size"));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (x, y) in a.iter().zip(b) {
        if x.margins.len() != y.margins.len() {
            return Err(MesaError::input("margin series differ in length"));
        }
        for (u, v) in x.margins.iter().zip(&y.margins) {
            sum += (u - v).abs();
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZipfCurve {
    /// `(rank, token, frequency)` with rank starting at 1.
    pub ranks: Vec<(usize, TokenId, u64)>,
    pub fit_range: (usize, usize),
    pub slope: f64,
    pub intercept: f64,
    /// Fewer than two distinct ranks in the fit range.
    pub degenerate: bool,
}

/// Rank-frequency curve of generated content tokens and its log-log fit.
///
/// `fit_range` is an inclusive rank window; `None` means `[1, min(200, ranks)]`.
pub fn zipf_analysis(traces: &[GenerationTrace], fit_range: Option<(usize, usize)>) -> Result<ZipfCurve> {
    let mut counts: BTreeMap<TokenId, u64> = BTreeMap::new();
    for t in traces {
        for &tok in t.content() {
            *counts.entry(tok).or_default() += 1;
        }
    }
    if counts.is_empty() {
        return Err(MesaError::Degenerate("no generated tokens to rank".into()));
    }
    let mut ranked: Vec<(TokenId, u64)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let freqs: Vec<f64> = ranked.iter().map(|&(_, c)| c as f64).collect();
    let range = fit_range.unwrap_or((1, ranked.len().min(200)));
    let (slope, intercept) = zipf_fit(&freqs, range);
    Ok(ZipfCurve {
        ranks: ranked.iter().enumerate().map(|(i, &(t, c))| (i + 1, t, c)).collect(),
        fit_range: range,
        slope,
        intercept,
        degenerate: !slope.is_finite(),
    })
}

/// Ordinary least squares of `ln f` on `ln rank` over an inclusive rank
/// window of descending frequencies. NaN when fewer than two points.
pub fn zipf_fit(freqs: &[f64], (lo, hi): (usize, usize)) -> (f64, f64) {
    let pts: Vec<(f64, f64)> = (lo.max(1)..=hi.min(freqs.len()))
        .filter(|&r| freqs[r - 1] > 0.0)
        .map(|r| ((r as f64).ln(), freqs[r - 1].ln()))
        .collect();
    if pts.len() < 2 {
        return (f64::NAN, f64::NAN);
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// Cumulative softmax mass by descending probability rank.
pub fn cumulative_mass_curve(logits: &[f64]) -> Vec<f64> {
    let p = softmax(logits);
    let mut acc = 0.0;
    rank_descending(&p)
        .into_iter()
        .map(|i| {
            acc += p[i];
            acc
        })
        .collect()
}

/// Steered-minus-vanilla comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BehaviorReport {
    pub vanilla: ChairReport,
    pub steered: ChairReport,
    pub delta_chair_s: f64,
    pub delta_chair_i: f64,
    pub delta_recall: f64,
    pub delta_length: f64,
    /// `delta_length / vanilla length`.
    pub relative_length_change: f64,
    /// `(vanilla − steered) / vanilla` CHAIR_S; zero when vanilla is zero.
    pub relative_chair_s_reduction: f64,
    pub zipf_slope_vanilla: f64,
    pub zipf_slope_steered: f64,
    pub zipf_slope_delta: f64,
    /// Mean absolute EOS-margin deviation along the vanilla trajectories.
    pub eos_margin_mad: Option<f64>,
}

pub fn behavior_report(
    vanilla: &[GenerationTrace],
    steered: &[GenerationTrace],
    scenes: &[Scene],
    vocab: &Vocabulary,
    margins: Option<(&[EosMarginSeries], &[EosMarginSeries])>,
) -> Result<BehaviorReport> {
    if vanilla.len() != steered.len() {
        return Err(MesaError::input("vanilla and steered trace sets differ in size"));
    }
    let v = chair_metrics(vanilla, scenes, vocab)?;
    let s = chair_metrics(steered, scenes, vocab)?;
    let slope = |t: &[GenerationTrace]| zipf_analysis(t, None).map(|z| z.slope).unwrap_or(f64::NAN);
    let (zv, zs) = (slope(vanilla), slope(steered));
    let eos_margin_mad = match margins {
        Some((a, b)) => Some(eos_margin_mad(a, b)?),
        None => None,
    };
    Ok(BehaviorReport {
        delta_chair_s: s.chair_s - v.chair_s,
        delta_chair_i: s.chair_i - v.chair_i,
        delta_recall: s.recall - v.recall,
        delta_length: s.avg_length - v.avg_length,
        relative_length_change: if v.avg_length > 0.0 {
            (s.avg_length - v.avg_length) / v.avg_length
        } else {
            0.0
        },
        relative_chair_s_reduction: if v.chair_s > 0.0 {
            (v.chair_s - s.chair_s) / v.chair_s
        } else {
            0.0
        },
        zipf_slope_vanilla: zv,
        zipf_slope_steered: zs,
        zipf_slope_delta: zs - zv,
        eos_margin_mad,
        vanilla: v,
        steered: s,
    })
}

/// One row of an alpha sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: String,
    pub alpha: f64,
    pub report: BehaviorReport,
}

pub const SWEEP_TSV_HEADER: &str = "method\talpha\tchair_s\tchair_i\trecall\tavg_length\trel_chair_s_reduction\trel_length_change\tzipf_slope\tzipf_slope_delta\teos_margin_mad";

/// Flat table for plotting.
pub fn sweep_tsv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_TSV_HEADER);
    out.push('\n');
    for r in rows {
        let b = &r.report;
        out.push_str(&format!(
            "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.4}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}\n",
            r.method,
            r.alpha,
            b.steered.chair_s,
            b.steered.chair_i,
            b.steered.recall,
            b.steered.avg_length,
            b.relative_chair_s_reduction,
            b.relative_length_change,
            b.zipf_slope_steered,
            b.zipf_slope_delta,
            b.eos_margin_mad.map_or("NA".to_string(), |m| format!("{m:.6}")),
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{World, WorldConfig};

    fn vocab() -> Vocabulary {
        World::new(WorldConfig::default()).unwrap().vocab().clone()
    }

    fn scene(objs: &[usize]) -> Scene {
        Scene {
            seed: 0,
            objects: objs.to_vec(),
            cells: (0..objs.len()).collect(),
        }
    }

    #[test]
    fn grounded_caption_has_zero_chair() {
        let v = vocab();
        let cap = vec![
            v.object_token(0),
            v.conjunction(),
            v.article(),
            v.object_token(1),
            v.period(),
        ];
        let r = chair_from_captions(&[&cap], &[scene(&[0, 1, 2])], &v).unwrap();
        assert_eq!((r.chair_s, r.chair_i), (0.0, 0.0));
        assert!((r.recall - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn two_sentence_hand_count() {
        let v = vocab();
        let o = |c| v.object_token(c);
        let cap = vec![o(0), o(1), v.period(), o(2), o(9), v.period()];
        let r = chair_from_captions(&[&cap], &[scene(&[0, 1, 2])], &v).unwrap();
        assert_eq!(r.sentences, 2);
        assert_eq!(r.chair_s, 0.5);
        assert_eq!(r.chair_i, 0.25);
        assert_eq!(r.per_object.get(v.token(o(9))), Some(&1));
    }

    #[test]
    fn misaligned_inputs_rejected() {
        let v = vocab();
        assert!(chair_from_captions(&[], &[scene(&[0])], &v).is_err());
    }

    #[test]
    fn eos_margin_hand_values() {
        assert_eq!(eos_margin(&[2.0, 1.0, 0.5], 2), 1.5);
        assert!(eos_margin(&[0.0, 1.0, 3.0], 2) < 0.0);
    }

    #[test]
    fn zipf_exact_power_law() {
        let freqs: Vec<f64> = (1..=50).map(|r| 1000.0 / r as f64).collect();
        let (slope, intercept) = zipf_fit(&freqs, (1, 50));
        assert!((slope + 1.0).abs() < 1e-3);
        assert!((intercept - 1000f64.ln()).abs() < 1e-9);
        assert!(zipf_fit(&freqs[..1], (1, 200)).0.is_nan());
    }

    #[test]
    fn cumulative_mass_shapes() {
        let c = cumulative_mass_curve(&[0.0; 10]);
        for (i, v) in c.iter().enumerate() {
            assert!((v - (i + 1) as f64 / 10.0).abs() < 1e-12);
        }
        let mut z = vec![0.0; 10];
        z[4] = 20.0;
        assert!(cumulative_mass_curve(&z)[0] > 0.99);
    }
}
