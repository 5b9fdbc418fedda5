//! Verification and identification metrics over similarity scores
//! (higher means more similar).

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::backbone::ModelAssembly;
use crate::block::Gate;
use crate::data::{DatasetBundle, Modality, SampleRecord, Split};
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

/// False-acceptance operating points reported by [`MetricsReport`].
pub const FAR_TARGETS: [f64; 4] = [0.0001, 0.001, 0.01, 0.05];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoreSet {
    pub genuine: Vec<f64>,
    pub impostor: Vec<f64>,
}

impl ScoreSet {
    fn check(&self) -> Result<()> {
        if self.genuine.is_empty() || self.impostor.is_empty() {
            return Err(Error::Data("threshold metrics need genuine and impostor scores".into()));
        }
        if self.genuine.iter().chain(&self.impostor).any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("score set"));
        }
        Ok(())
    }

    pub fn swapped(&self) -> ScoreSet {
        ScoreSet { genuine: self.impostor.clone(), impostor: self.genuine.clone() }
    }
}

/// Gallery-by-probe cosine similarities, row-major by probe.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    pub probes: usize,
    pub gallery: usize,
    pub values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn row(&self, probe: usize) -> &[f64] {
        &self.values[probe * self.gallery..(probe + 1) * self.gallery]
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Scores every gallery × probe pair; genuine when identities match.
pub fn score_pairs(
    gallery: &Tensor,
    gallery_ids: &[u32],
    probes: &Tensor,
    probe_ids: &[u32],
) -> Result<(ScoreSet, SimilarityMatrix)> {
    let (ng, d) = gallery.dims2("score_pairs")?;
    let (np, pd) = probes.dims2("score_pairs")?;
    if ng == 0 || np == 0 {
        return Err(Error::Data("score_pairs needs a non-empty gallery and probe set".into()));
    }
    if d != pd || ng != gallery_ids.len() || np != probe_ids.len() {
        return Err(Error::shape(
            "score_pairs",
            format!("gallery {:?}/{} ids, probes {:?}/{} ids", gallery.shape(), gallery_ids.len(), probes.shape(), probe_ids.len()),
        ));
    }
    let rows = par::map_range(np, |p| {
        let pr = &probes.data()[p * d..(p + 1) * d];
        (0..ng).map(|g| cosine(&gallery.data()[g * d..(g + 1) * d], pr)).collect::<Vec<_>>()
    });
    let values = rows.concat();
    let mut set = ScoreSet::default();
    for (p, &pid) in probe_ids.iter().enumerate() {
        for (g, &gid) in gallery_ids.iter().enumerate() {
            let s = values[p * ng + g];
            if pid == gid {
                set.genuine.push(s);
            } else {
                set.impostor.push(s);
            }
        }
    }
    Ok((set, SimilarityMatrix { probes: np, gallery: ng, values }))
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// Equal error rate. Thresholds sweep the union of scores; at each, FAR is
/// the fraction of impostors `>= t` and FRR the fraction of genuines `< t`.
/// Returns `(FAR + FRR) / 2` where `|FAR − FRR|` is smallest, preferring the
/// lower threshold on ties.
pub fn eer(s: &ScoreSet) -> Result<f64> {
    s.check()?;
    let gen = sorted(&s.genuine);
    let imp = sorted(&s.impostor);
    let thresholds = sorted(&[gen.as_slice(), imp.as_slice()].concat());
    let (ng, ni) = (gen.len() as u128, imp.len() as u128);
    let (mut gi, mut ii) = (0usize, 0usize);
    let mut best: Option<(u128, u128, u128)> = None;
    for &t in &thresholds {
        while gi < gen.len() && gen[gi] < t {
            gi += 1;
        }
        while ii < imp.len() && imp[ii] < t {
            ii += 1;
        }
        let false_accepts = (imp.len() - ii) as u128;
        let false_rejects = gi as u128;
        // |FAR − FRR| scaled by ng·ni, exact
        let gap = (false_accepts * ng).abs_diff(false_rejects * ni);
        if best.is_none_or(|(b, _, _)| gap < b) {
            best = Some((gap, false_accepts, false_rejects));
        }
    }
    let (_, fa, fr) = best.expect("at least one threshold");
    Ok((fa as f64 / ni as f64 + fr as f64 / ng as f64) / 2.0)
}

/// Probability that a random genuine score beats a random impostor score,
/// ties counting one half.
pub fn auc(s: &ScoreSet) -> Result<f64> {
    s.check()?;
    let imp = sorted(&s.impostor);
    let mut wins = 0.0;
    for &g in &s.genuine {
        let below = imp.partition_point(|&x| x < g);
        let not_above = imp.partition_point(|&x| x <= g);
        wins += below as f64 + 0.5 * (not_above - below) as f64;
    }
    Ok(wins / (s.genuine.len() as f64 * s.impostor.len() as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationRate {
    pub rate: f64,
    pub threshold: f64,
    /// Fewer than `1 / far_target` impostor scores were available.
    pub small_sample: bool,
}

/// Verification rate at the smallest threshold whose FAR does not exceed
/// `far_target`. Candidate thresholds are the observed scores plus the value
/// just above the largest impostor score.
pub fn vr_at_far(s: &ScoreSet, far_target: f64) -> Result<VerificationRate> {
    s.check()?;
    let imp = sorted(&s.impostor);
    let gen = sorted(&s.genuine);
    let max_imp = *imp.last().expect("non-empty");
    let mut candidates = [gen.as_slice(), imp.as_slice()].concat();
    candidates.push(max_imp.next_up());
    let candidates = sorted(&candidates);
    let ni = imp.len() as f64;
    let mut ii = 0;
    let threshold = candidates
        .into_iter()
        .find(|&t| {
            while ii < imp.len() && imp[ii] < t {
                ii += 1;
            }
            (imp.len() - ii) as f64 / ni <= far_target
        })
        .expect("the value above every impostor always qualifies");
    let accepted = gen.len() - gen.partition_point(|&x| x < threshold);
    Ok(VerificationRate {
        rate: accepted as f64 / gen.len() as f64,
        threshold,
        small_sample: ni < 1.0 / far_target,
    })
}

/// Fraction of probes whose best-scoring gallery entry has their identity.
/// Ties go to the lowest gallery index.
pub fn rank1(gallery_ids: &[u32], probe_ids: &[u32], sim: &SimilarityMatrix) -> Result<f64> {
    if sim.gallery != gallery_ids.len() || sim.probes != probe_ids.len() || sim.probes == 0 || sim.gallery == 0 {
        return Err(Error::shape("rank1", "similarity matrix does not match id lists"));
    }
    let mut hits = 0usize;
    for (p, &pid) in probe_ids.iter().enumerate() {
        if !gallery_ids.contains(&pid) {
            return Err(Error::Data(format!("probe identity {pid} is absent from the gallery")));
        }
        let row = sim.row(p);
        let mut best = 0;
        for (g, &v) in row.iter().enumerate().skip(1) {
            if v > row[best] {
                best = g;
            }
        }
        if gallery_ids[best] == pid {
            hits += 1;
        }
    }
    Ok(hits as f64 / probe_ids.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub gallery: usize,
    pub probes: usize,
    pub genuine: usize,
    pub impostor: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auc: f64,
    pub eer: f64,
    pub rank1: f64,
    /// Keyed by the FAR target as written in [`FAR_TARGETS`].
    pub vr_at_far: BTreeMap<String, f64>,
    pub small_sample_far: Vec<String>,
    pub counts: Counts,
}

pub fn far_key(far: f64) -> String {
    format!("{far}")
}

impl MetricsReport {
    pub fn compute(scores: &ScoreSet, sim: &SimilarityMatrix, gallery_ids: &[u32], probe_ids: &[u32]) -> Result<Self> {
        let mut vr = BTreeMap::new();
        let mut small = Vec::new();
        for far in FAR_TARGETS {
            let v = vr_at_far(scores, far)?;
            vr.insert(far_key(far), v.rate);
            if v.small_sample {
                small.push(far_key(far));
            }
        }
        Ok(MetricsReport {
            auc: auc(scores)?,
            eer: eer(scores)?,
            rank1: rank1(gallery_ids, probe_ids, sim)?,
            vr_at_far: vr,
            small_sample_far: small,
            counts: Counts {
                gallery: gallery_ids.len(),
                probes: probe_ids.len(),
                genuine: scores.genuine.len(),
                impostor: scores.impostor.len(),
            },
        })
    }

    pub fn vr(&self, far: f64) -> f64 {
        self.vr_at_far[&far_key(far)]
    }
}

/// One line of a score dump.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreRow {
    pub probe_id: u32,
    pub gallery_id: u32,
    pub score: f64,
    pub genuine: bool,
}

pub fn scores_csv(rows: &[ScoreRow]) -> String {
    let mut out = String::from("probe_id,gallery_id,score,genuine_flag\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{:e},{}", r.probe_id, r.gallery_id, r.score, u8::from(r.genuine));
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    /// Source gallery against target probes, target embedded with gate 1.
    pub cross: MetricsReport,
    /// Source against source with gate 0 only; `None` with one sample per identity.
    pub source: Option<MetricsReport>,
    pub scores: Vec<ScoreRow>,
}

fn ids(records: &[&SampleRecord]) -> Vec<u32> {
    records.iter().map(|r| r.identity).collect()
}

fn images<'a>(records: &[&'a SampleRecord]) -> Vec<&'a Tensor> {
    records.iter().map(|r| &r.image).collect()
}

/// Identification/verification on one gallery/probe protocol.
pub fn protocol_report(
    model: &ModelAssembly,
    gallery: &[&SampleRecord],
    gallery_gate: Gate,
    probes: &[&SampleRecord],
    probe_gate: Gate,
) -> Result<(MetricsReport, Vec<ScoreRow>)> {
    let ge = model.embed_images(&images(gallery), gallery_gate)?;
    let pe = model.embed_images(&images(probes), probe_gate)?;
    let (gids, pids) = (ids(gallery), ids(probes));
    let (set, sim) = score_pairs(&ge, &gids, &pe, &pids)?;
    let report = MetricsReport::compute(&set, &sim, &gids, &pids)?;
    let mut rows = Vec::with_capacity(sim.values.len());
    for (p, &pid) in pids.iter().enumerate() {
        for (g, &gid) in gids.iter().enumerate() {
            rows.push(ScoreRow { probe_id: pid, gallery_id: gid, score: sim.row(p)[g], genuine: pid == gid });
        }
    }
    Ok((report, rows))
}

/// Cross-modal report on the eval split plus the source-only report used to
/// detect forgetting.
pub fn evaluate(model: &ModelAssembly, data: &DatasetBundle) -> Result<Evaluation> {
    let gallery = data.select(Split::Eval, Modality::Source);
    let probes = data.select(Split::Eval, Modality::Target);
    let (cross, scores) = protocol_report(model, &gallery, Gate::Source, &probes, Gate::Target)?;
    let source = source_report(model, data, Split::Eval)?;
    Ok(Evaluation { cross, source, scores })
}

/// Even-indexed source samples as gallery, odd-indexed as probes.
pub fn source_report(model: &ModelAssembly, data: &DatasetBundle, split: Split) -> Result<Option<MetricsReport>> {
    let (mut gallery, mut probes) = (Vec::new(), Vec::new());
    for s in data.samples.iter().filter(|s| s.split == split && s.record.modality == Modality::Source) {
        if s.index % 2 == 0 {
            gallery.push(&s.record);
        } else {
            probes.push(&s.record);
        }
    }
    if probes.is_empty() {
        return Ok(None);
    }
    Ok(Some(protocol_report(model, &gallery, Gate::Source, &probes, Gate::Source)?.0))
}
