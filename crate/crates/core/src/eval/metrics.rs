use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{bucket_by_target_popularity, ClickSession, ItemId, PopularityTable};
use crate::error::{Error, Result};
use crate::simulator::{OnlineEvaluation, OnlineScope};
use crate::sr::{rank_of, top_k, SrModel};

/// 1 if `target` is among the first `k` entries of `ranked`.
pub fn recall_at_k(ranked: &[ItemId], target: ItemId, k: usize) -> f64 {
    if ranked.iter().take(k).any(|&i| i == target) {
        1.0
    } else {
        0.0
    }
}

/// Reciprocal rank of `target` within the first `k` entries, else 0.
pub fn mrr_at_k(ranked: &[ItemId], target: ItemId, k: usize) -> f64 {
    ranked
        .iter()
        .take(k)
        .position(|&i| i == target)
        .map_or(0.0, |p| 1.0 / (p + 1) as f64)
}

/// Mean over lists of the mean normalized popularity of their items.
pub fn arp(lists: &[Vec<ItemId>], pop: &PopularityTable) -> Result<f64> {
    if lists.is_empty() || lists.iter().any(Vec::is_empty) {
        return Err(Error::InvalidInput("ARP needs non-empty recommendation lists".into()));
    }
    let mut total = 0.0;
    for list in lists {
        let mut s = 0.0;
        for &i in list {
            s += pop.pop(i)?;
        }
        total += s / list.len() as f64;
    }
    Ok(total / lists.len() as f64)
}

/// Metrics of one scope. Offline scopes carry recall/MRR, online ones CTR.
/// Recall, MRR and ARP are fractions; CTR is a percentage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScopeMetrics {
    pub name: String,
    pub count: usize,
    pub recall: Option<f64>,
    pub recall_at_1: Option<f64>,
    pub mrr: Option<f64>,
    pub arp: f64,
    pub ctr: Option<f64>,
    pub session_ctr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    pub mode: String,
    pub k: usize,
    pub scopes: Vec<ScopeMetrics>,
    /// Sessions too short to evaluate.
    pub skipped: usize,
    pub fingerprint: String,
    pub seed: u64,
}

impl MetricsReport {
    pub fn scope(&self, name: &str) -> Option<&ScopeMetrics> {
        self.scopes.iter().find(|s| s.name == name)
    }

    /// Fixed-width table; recall and MRR are shown ×100.
    pub fn to_text(&self) -> String {
        let pct = |v: Option<f64>, scale: f64| v.map_or("-".to_string(), |v| format!("{:.2}", v * scale));
        let mut out = format!(
            "model {} ({}), K={}, seed {}, config {}\n",
            self.model,
            self.mode,
            self.k,
            self.seed,
            &self.fingerprint[..self.fingerprint.len().min(12)]
        );
        out.push_str(&format!(
            "{:<12} {:>7} {:>9} {:>9} {:>9} {:>8} {:>8} {:>8}\n",
            "scope",
            "n",
            format!("R@{}", self.k),
            "R@1",
            format!("MRR@{}", self.k),
            "ARP",
            "CTR",
            "sessCTR"
        ));
        for s in &self.scopes {
            out.push_str(&format!(
                "{:<12} {:>7} {:>9} {:>9} {:>9} {:>8.4} {:>8} {:>8}\n",
                s.name,
                s.count,
                pct(s.recall, 100.0),
                pct(s.recall_at_1, 100.0),
                pct(s.mrr, 100.0),
                s.arp,
                pct(s.ctr, 1.0),
                pct(s.session_ctr, 1.0),
            ));
        }
        if self.skipped > 0 {
            out.push_str(&format!("skipped {} sessions shorter than 2\n", self.skipped));
        }
        out
    }
}

struct SessionScore {
    hit: f64,
    hit1: f64,
    rr: f64,
    arp: f64,
}

const EVAL_CHUNK: usize = 256;

fn score_sessions(model: &SrModel, sessions: &[&ClickSession], k: usize, pop: &PopularityTable) -> Result<Vec<SessionScore>> {
    let none = HashSet::new();
    let chunks: Vec<Vec<SessionScore>> = sessions
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| {
            let items: Vec<Vec<ItemId>> = chunk.iter().map(|s| s.items()).collect();
            let prefixes: Vec<&[ItemId]> = items.iter().map(|s| &s[..s.len() - 1]).collect();
            let scores = model.score_batch(&prefixes)?;
            items
                .iter()
                .enumerate()
                .map(|(b, s)| {
                    let row = scores.row(b);
                    let target = s[s.len() - 1];
                    if target >= row.len() {
                        return Err(Error::Index {
                            what: "catalog",
                            index: target,
                            len: row.len(),
                        });
                    }
                    let list = top_k(row, k, &none)?;
                    let rank = rank_of(row, target);
                    let mut a = 0.0;
                    for &i in &list {
                        a += pop.pop(i)?;
                    }
                    Ok(SessionScore {
                        hit: f64::from(u8::from(rank <= k)),
                        hit1: f64::from(u8::from(rank == 1)),
                        rr: if rank <= k { 1.0 / rank as f64 } else { 0.0 },
                        arp: a / list.len() as f64,
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

fn offline_scope(name: &str, scores: &[SessionScore]) -> ScopeMetrics {
    let n = scores.len();
    let mean = |f: fn(&SessionScore) -> f64| {
        if n == 0 {
            0.0
        } else {
            scores.iter().map(f).sum::<f64>() / n as f64
        }
    };
    ScopeMetrics {
        name: name.to_string(),
        count: n,
        recall: Some(mean(|s| s.hit)),
        recall_at_1: Some(mean(|s| s.hit1)),
        mrr: Some(mean(|s| s.rr)),
        arp: mean(|s| s.arp),
        ctr: None,
        session_ctr: None,
    }
}

/// Next-item evaluation: every test session's last item is predicted from the
/// rest, ranked over the whole catalog. Scopes are overall and the three
/// target-popularity buckets.
pub fn evaluate_offline(
    model: &SrModel,
    test: &[ClickSession],
    k: usize,
    pop: &PopularityTable,
) -> Result<MetricsReport> {
    if k == 0 {
        return Err(Error::InvalidInput("K must be positive".into()));
    }
    if pop.len() != model.n_items() {
        return Err(Error::InvalidInput("popularity table does not match the model catalog".into()));
    }
    let usable: Vec<ClickSession> = test.iter().filter(|s| s.len() >= 2).cloned().collect();
    let skipped = test.len() - usable.len();
    if usable.is_empty() {
        return Err(Error::EmptyDataset("no test sessions of length >= 2".into()));
    }
    let all: Vec<&ClickSession> = usable.iter().collect();
    let mut scopes = vec![offline_scope("overall", &score_sessions(model, &all, k, pop)?)];
    let buckets = bucket_by_target_popularity(&usable, pop)?;
    for (name, sessions) in buckets.named() {
        let refs: Vec<&ClickSession> = sessions.iter().collect();
        scopes.push(offline_scope(name, &score_sessions(model, &refs, k, pop)?));
    }
    Ok(MetricsReport {
        model: String::new(),
        mode: "offline".into(),
        k,
        scopes,
        skipped,
        fingerprint: String::new(),
        seed: 0,
    })
}

fn online_scope(s: &OnlineScope) -> ScopeMetrics {
    ScopeMetrics {
        name: s.name.clone(),
        count: s.sessions,
        recall: None,
        recall_at_1: None,
        mrr: None,
        arp: s.arp,
        ctr: Some(s.ctr),
        session_ctr: Some(s.session_ctr),
    }
}

pub fn online_report(eval: &OnlineEvaluation, k: usize) -> MetricsReport {
    let mut scopes = vec![online_scope(&eval.overall)];
    scopes.extend(eval.by_type.iter().map(online_scope));
    MetricsReport {
        model: String::new(),
        mode: "online".into(),
        k,
        scopes,
        skipped: 0,
        fingerprint: String::new(),
        seed: 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sr::SrVariant;
    use proptest::prelude::*;

    #[test]
    fn list_metrics() {
        let ranked = [4, 2, 7, 1, 0, 9];
        assert_eq!(recall_at_k(&ranked, 7, 5), 1.0);
        assert_eq!(recall_at_k(&ranked, 9, 5), 0.0);
        assert_eq!(recall_at_k(&ranked, 9, 10), 1.0);
        assert_eq!(mrr_at_k(&ranked, 7, 5), 1.0 / 3.0);
        assert_eq!(mrr_at_k(&ranked, 4, 5), 1.0);
        assert_eq!(mrr_at_k(&ranked, 3, 5), 0.0);
    }

    #[test]
    fn arp_cases() {
        let pop = PopularityTable::from_counts(vec![10, 5, 3, 0]);
        assert!((arp(&[vec![0, 1, 2]], &pop).unwrap() - 0.6).abs() < 1e-12);
        assert_eq!(arp(&[vec![0], vec![0]], &pop).unwrap(), 1.0);
        assert!(arp(&[vec![4]], &pop).is_err());
        assert!(arp(&[], &pop).is_err());
    }

    #[test]
    fn fixed_slate_model_arp_everywhere() {
        let n = 12;
        let pop = PopularityTable::from_counts((1..=n as u64).collect());
        let test: Vec<ClickSession> = (0..30)
            .map(|i| ClickSession::from_items(i, &[(i as usize) % n, (i as usize * 7 + 1) % n]))
            .collect();
        // zero embeddings give equal scores, so top-2 is always {0, 1}
        let mut zero = SrModel::init(n, 4, SrVariant::Plain, 0).unwrap();
        zero.params.set("sr.emb", crate::nn::Tensor::zeros(&[n, 4])).unwrap();
        let report = evaluate_offline(&zero, &test, 2, &pop).unwrap();
        let expected = (pop.pop(0).unwrap() + pop.pop(1).unwrap()) / 2.0;
        for s in &report.scopes {
            assert!((s.arp - expected).abs() < 1e-12, "{}", s.name);
        }
    }

    #[test]
    fn skips_short_sessions_and_rejects_empty() {
        let m = SrModel::init(5, 4, SrVariant::Plain, 0).unwrap();
        let pop = PopularityTable::from_counts(vec![1; 5]);
        let test = vec![ClickSession::from_items(0, &[1]), ClickSession::from_items(1, &[1, 2])];
        let r = evaluate_offline(&m, &test, 3, &pop).unwrap();
        assert_eq!(r.skipped, 1);
        assert_eq!(r.scope("overall").unwrap().count, 1);
        assert!(evaluate_offline(&m, &test[..1], 3, &pop).is_err());
    }

    #[test]
    fn text_report_scales_fractions() {
        let r = MetricsReport {
            model: "m".into(),
            mode: "offline".into(),
            k: 5,
            scopes: vec![ScopeMetrics {
                name: "overall".into(),
                count: 3,
                recall: Some(0.123456),
                recall_at_1: Some(0.1),
                mrr: Some(0.05),
                arp: 0.25,
                ctr: None,
                session_ctr: None,
            }],
            skipped: 0,
            fingerprint: "abcdef0123456789".into(),
            seed: 7,
        };
        let t = r.to_text();
        assert!(t.contains("12.35"));
        assert!(t.contains("0.2500"));
        assert!(t.contains("abcdef012345"));
    }

    fn brute_rank(scores: &[f64], target: usize) -> usize {
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
        order.iter().position(|&i| i == target).unwrap() + 1
    }

    proptest! {
        #[test]
        fn list_metrics_match_rank(perm in Just((0..8usize).collect::<Vec<_>>()).prop_shuffle(), target in 0..8usize, k in 1..10usize) {
            let rank = perm.iter().position(|&i| i == target).unwrap() + 1;
            prop_assert_eq!(recall_at_k(&perm, target, k), if rank <= k { 1.0 } else { 0.0 });
            prop_assert_eq!(mrr_at_k(&perm, target, k), if rank <= k { 1.0 / rank as f64 } else { 0.0 });
            prop_assert!(mrr_at_k(&perm, target, k) <= recall_at_k(&perm, target, k));
        }

        #[test]
        fn rank_matches_sort(scores in prop::collection::vec(-3i32..3, 1..10), t in 0..10usize) {
            let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
            let t = t % scores.len();
            prop_assert_eq!(rank_of(&scores, t), brute_rank(&scores, t));
            let list = top_k(&scores, scores.len(), &HashSet::new()).unwrap();
            prop_assert_eq!(list.iter().position(|&i| i == t).unwrap() + 1, rank_of(&scores, t));
        }

        #[test]
        fn buckets_average_to_overall(seed in 0u64..50, n_sessions in 3usize..40) {
            let n = 9;
            let m = SrModel::init(n, 4, SrVariant::Plain, seed).unwrap();
            let mut r = crate::rng::stream(seed, "bucket-test");
            let test: Vec<ClickSession> = (0..n_sessions)
                .map(|i| {
                    let len = 2 + crate::rng::below(&mut r, 3);
                    let items: Vec<usize> = (0..len).map(|_| crate::rng::below(&mut r, n)).collect();
                    ClickSession::from_items(i as u64, &items)
                })
                .collect();
            let counts: Vec<u64> = (0..n).map(|_| crate::rng::below(&mut r, 5) as u64).collect();
            let pop = PopularityTable::from_counts(counts);
            let rep = evaluate_offline(&m, &test, 3, &pop).unwrap();
            let overall = rep.scope("overall").unwrap();
            let parts: Vec<&ScopeMetrics> = rep.scopes[1..].iter().collect();
            prop_assert_eq!(parts.iter().map(|s| s.count).sum::<usize>(), overall.count);
            for f in [|s: &ScopeMetrics| s.recall.unwrap(), |s: &ScopeMetrics| s.mrr.unwrap(), |s: &ScopeMetrics| s.arp] {
                let weighted: f64 = parts.iter().map(|s| f(s) * s.count as f64).sum::<f64>() / overall.count as f64;
                prop_assert!((weighted - f(overall)).abs() < 1e-9);
            }
            for s in &rep.scopes {
                prop_assert!(s.recall_at_1.unwrap() <= s.recall.unwrap());
                prop_assert!(s.mrr.unwrap() <= s.recall.unwrap());
                prop_assert!((0.0..=1.0).contains(&s.arp));
            }
        }
    }
}
