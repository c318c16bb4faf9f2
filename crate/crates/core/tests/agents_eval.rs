use std::sync::Arc;

use chrono::{Days, NaiveDate};
use proptest::prelude::*;
use wipcast_core::eval::{summarize, EvalError};
use wipcast_core::memory::MemoryError;
use wipcast_core::{
    combine, predict_all, predictor_predict, render_contextual_story, rolling_forecast, trend_analyze, AgentId,
    EmbeddingProvider, EmbeddingVector, EvalSettings, Granularity, HashingEmbedder, PredictorConfig,
    ProcessMemory, Retention, Source, StubBackend, TraceEntry, TrendConfig, TrendLabel, WipEvent, WipSeries,
};
use wipcast_core::eval::{empty_memories, mae, mape, persistence_baseline, PredictionTrace};

/// Embeds everything to the same vector, so every candidate ties.
struct Constant;

impl EmbeddingProvider for Constant {
    fn id(&self) -> &str {
        "constant"
    }
    fn dim(&self) -> Option<usize> {
        Some(2)
    }
    fn embed(&self, _: &str) -> Result<EmbeddingVector, MemoryError> {
        EmbeddingVector::new(vec![1.0, 1.0])
    }
}

fn base() -> NaiveDate {
    NaiveDate::from_ymd_opt(2024, 4, 1).unwrap()
}

fn series_of(closes: &[u64]) -> WipSeries {
    let mut prev = closes.first().copied().unwrap_or(0);
    let events = closes
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let (lo, hi) = (prev.min(c), prev.max(c));
            let new = c.saturating_sub(prev) + 2;
            let done = prev.saturating_sub(c) + 2;
            let ev = WipEvent::on(base() + Days::new(i as u64))
                .with_ohlc(prev, hi + 1, lo.saturating_sub(1), c)
                .with_counts(new, done, new.min(3));
            prev = c;
            ev
        })
        .collect();
    WipSeries {
        events,
        lifecycle: Default::default(),
        timezone: chrono_tz::UTC,
        contiguous: true,
        diagnostics: vec![],
    }
}

fn memory_with_targets(provider: Arc<dyn EmbeddingProvider>, targets: &[f64]) -> ProcessMemory {
    let mut m = ProcessMemory::new(Granularity::Daily, provider, Retention::default());
    for (i, &t) in targets.iter().enumerate() {
        let ev = WipEvent::on(base() + Days::new(i as u64)).with_ohlc(60, 70, 55, 66);
        m.add_story(render_contextual_story(&ev, t, Granularity::Daily).unwrap()).unwrap();
    }
    m
}

#[test]
fn equal_similarity_predictor_returns_mean_target() {
    let history = series_of(&[66; 6]);
    let memory = memory_with_targets(Arc::new(Constant), &[70.0, 71.0, 72.0, 68.0, 69.0]);
    let cfg = PredictorConfig::default();
    let p = predictor_predict(AgentId::Daily, base() + Days::new(5), &history, &memory, &StubBackend, &cfg).unwrap();
    assert_eq!(p.value, 70.0);
    assert_eq!(p.retrieved.len(), 5);
    assert_eq!(p.date, base() + Days::new(6));

    let same = memory_with_targets(Arc::new(Constant), &[71.0; 5]);
    let p = predictor_predict(AgentId::Daily, base() + Days::new(5), &history, &same, &StubBackend, &cfg).unwrap();
    assert_eq!(p.value, 71.0);
}

#[test]
fn empty_memory_repeats_current_close() {
    let history = series_of(&[10, 12, 15]);
    let memory = ProcessMemory::new(Granularity::Daily, Arc::new(Constant), Retention::default());
    let p = predictor_predict(AgentId::Daily, base() + Days::new(2), &history, &memory, &StubBackend, &PredictorConfig::default())
        .unwrap();
    assert_eq!(p.value, 15.0);
    assert!(p.retrieved.is_empty());
}

#[test]
fn predictor_ignores_stories_from_the_current_day_onwards() {
    let history = series_of(&[66; 6]);
    let memory = memory_with_targets(Arc::new(Constant), &[10.0, 10.0, 10.0, 10.0, 10.0, 500.0]);
    let p = predictor_predict(AgentId::Daily, base() + Days::new(5), &history, &memory, &StubBackend, &PredictorConfig::default())
        .unwrap();
    assert_eq!(p.value, 10.0);
}

#[test]
fn stub_predictions_are_deterministic() {
    let closes: Vec<u64> = (0..30).map(|i| 20 + (i * 7 % 11)).collect();
    let s = series_of(&closes);
    let provider: Arc<dyn EmbeddingProvider> = Arc::new(HashingEmbedder::default());
    let mut memories = empty_memories(provider, &Retention::default());
    for m in memories.iter_mut() {
        let stories = (0..28)
            .filter_map(|i| wipcast_core::narrative::contextual_story_at(&s, i, m.granularity, 7))
            .collect();
        m.add_stories(stories).unwrap();
    }
    let day = base() + Days::new(29);
    let a = predict_all(day, &s, &memories, &StubBackend, &PredictorConfig::default()).unwrap();
    let b = predict_all(day, &s, &memories, &StubBackend, &PredictorConfig::default()).unwrap();
    assert_eq!(a, b);
    for p in &a {
        assert!(p.retrieved.iter().all(|r| r.document.story.date < day));
    }
}

fn weights() -> impl Strategy<Value = [f64; 3]> {
    (0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0)
        .prop_filter("positive mass", |(a, b, c)| a + b + c > 1e-6)
        .prop_map(|(a, b, c)| {
            let s = a + b + c;
            [a / s, b / s, c / s]
        })
}

proptest! {
    #[test]
    fn combination_is_convex(w in weights(), v in proptest::array::uniform3(0.0f64..1e5)) {
        let values: Vec<(AgentId, f64)> = AgentId::ALL.into_iter().zip(v).collect();
        let out = combine(w, &values);
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(lo <= out && out <= hi);
        let oracle: f64 = w.iter().zip(v).map(|(a, b)| a * b).sum();
        prop_assert!((out - oracle).abs() <= 1e-9 * hi.max(1.0));
        prop_assert_eq!(combine(w, &[(AgentId::Daily, v[0]), (AgentId::Weekday, v[0]), (AgentId::Windowed, v[0])]), v[0]);
    }

    #[test]
    fn trend_label_is_scale_invariant(closes in proptest::collection::vec(1.0f64..1000.0, 1..30), exp in -8i32..8) {
        let c = 2f64.powi(exp);
        let scaled: Vec<f64> = closes.iter().map(|x| x * c).collect();
        let cfg = TrendConfig::default();
        let a = trend_analyze(&closes, &cfg).unwrap();
        let b = trend_analyze(&scaled, &cfg).unwrap();
        prop_assert_eq!(a.label, b.label);
        prop_assert_eq!(a.relative_change, b.relative_change);
    }

    #[test]
    fn trend_of_monotone_series_has_matching_sign(start in 10.0f64..100.0, step in 0.5f64..5.0, n in 8usize..30) {
        let up: Vec<f64> = (0..n).map(|i| start + step * i as f64).collect();
        let down: Vec<f64> = up.iter().rev().cloned().collect();
        let cfg = TrendConfig::default();
        prop_assert!(trend_analyze(&up, &cfg).unwrap().relative_change > 0.0);
        prop_assert!(trend_analyze(&down, &cfg).unwrap().relative_change < 0.0);
    }
}

#[test]
fn short_histories_are_stable() {
    let cfg = TrendConfig::default();
    for n in 1..=7 {
        let closes: Vec<f64> = (0..n).map(|i| 10.0 * (i + 1) as f64).collect();
        assert_eq!(trend_analyze(&closes, &cfg).unwrap().label, TrendLabel::Stable);
    }
}

fn oracle_mape(a: &[f64], p: &[f64]) -> Option<(f64, usize)> {
    let terms: Vec<f64> = a.iter().zip(p).filter(|(a, _)| **a != 0.0).map(|(a, p)| ((a - p) / a).abs()).collect();
    (!terms.is_empty()).then(|| (100.0 * terms.iter().sum::<f64>() / terms.len() as f64, a.len() - terms.len()))
}

proptest! {
    #[test]
    fn metrics_match_oracle(pairs in proptest::collection::vec((0u32..50, 0.0f64..100.0), 1..80)) {
        let a: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
        let p: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        match (mape(&a, &p), oracle_mape(&a, &p)) {
            (Ok(m), Some((want, skipped))) => {
                prop_assert!((m.mape - want).abs() <= 1e-9 * want.max(1.0));
                prop_assert_eq!(m.skipped_zero_actuals, skipped);
            }
            (Err(EvalError::AllZeroActuals), None) => {}
            (got, want) => prop_assert!(false, "{:?} vs {:?}", got, want),
        }
        let want_mae = a.iter().zip(&p).map(|(a, p)| (a - p).abs()).sum::<f64>() / a.len() as f64;
        prop_assert!((mae(&a, &p).unwrap() - want_mae).abs() <= 1e-9 * want_mae.max(1.0));
    }

    #[test]
    fn persistence_mape_is_mean_relative_step(closes in proptest::collection::vec(1u64..200, 6..40)) {
        let s = series_of(&closes);
        let trace = persistence_baseline(&s, None).unwrap();
        let n = closes.len();
        let test = ((n as f64 * 0.2).round() as usize).max(1);
        prop_assert_eq!(trace.len(), test);
        let want = (n - test..n)
            .map(|j| (closes[j] as f64 - closes[j - 1] as f64).abs() / closes[j] as f64)
            .sum::<f64>()
            / test as f64
            * 100.0;
        let got = summarize(&trace).unwrap();
        prop_assert_eq!(got.len(), 1);
        prop_assert!((got[0].mape - want).abs() < 1e-9 * want.max(1.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn walk_forward_never_sees_the_future(closes in proptest::collection::vec(1u64..60, 20..36)) {
        let s = series_of(&closes);
        let run = rolling_forecast(&s, None, &EvalSettings::default(), Arc::new(HashingEmbedder::default()), &StubBackend).unwrap();
        let split = run.trace.dates()[0];
        let split_pos = s.position(split).unwrap();
        for (audit, report) in run.audits.iter().zip(&run.reports) {
            prop_assert_eq!(audit.date, report.date);
            let j = s.position(audit.date).unwrap();
            prop_assert!(j >= split_pos);
            prop_assert_eq!(audit.corpus_sizes, [j - 1, j - 1, j.saturating_sub(7)]);
            let cutoff = audit.date - Days::new(1);
            prop_assert!(audit.max_story_date.is_none_or(|m| m < cutoff));
            for p in &report.agent_predictions {
                prop_assert!(p.retrieved.iter().all(|r| r.document.story.date < cutoff));
            }
        }
        prop_assert_eq!(run.trace.len(), 5 * run.reports.len());
        for source in Source::ALL {
            prop_assert_eq!(run.trace.for_source(source).len(), run.reports.len());
        }
    }
}

#[test]
fn walk_forward_is_reproducible_and_writes_same_csv() {
    let closes: Vec<u64> = (0..40).map(|i| 30 + (i * 13 % 17)).collect();
    let s = series_of(&closes);
    let go = || {
        let run = rolling_forecast(&s, None, &EvalSettings::default(), Arc::new(HashingEmbedder::default()), &StubBackend).unwrap();
        let mut buf = Vec::new();
        run.trace.write_csv(&mut buf).unwrap();
        buf
    };
    let a = go();
    assert_eq!(a, go());
    let back = PredictionTrace::read_csv(a.as_slice()).unwrap();
    assert_eq!(back.len(), 5 * 8);
}

#[test]
fn trace_entries_sort_by_date_then_source() {
    let e = |day: u64, source| TraceEntry {
        date: base() + Days::new(day),
        source,
        actual: 1.0,
        predicted: 1.0,
    };
    let t = PredictionTrace::from_entries(vec![e(2, Source::Persistence), e(1, Source::DailyOnly), e(1, Source::MultiAgent)]);
    let order: Vec<(NaiveDate, Source)> = t.entries.iter().map(|x| (x.date, x.source)).collect();
    assert_eq!(
        order,
        [(base() + Days::new(1), Source::MultiAgent), (base() + Days::new(1), Source::DailyOnly), (base() + Days::new(2), Source::Persistence)]
    );
}

#[test]
fn example_day_with_seeded_corpus_predicts_71() {
    let provider: Arc<dyn EmbeddingProvider> = Arc::new(HashingEmbedder::default());
    let mut memory = ProcessMemory::new(Granularity::Daily, provider, Retention::default());
    let day = |i: u64| WipEvent::on(base() + Days::new(i));
    for i in 0..5 {
        let ev = day(i).with_ohlc(55, 70, 55, 66).with_counts(24, 10, 21);
        memory.add_story(render_contextual_story(&ev, 71.0, Granularity::Daily).unwrap()).unwrap();
    }
    for i in 5..15 {
        let ev = day(i).with_ohlc(5 + i, 9 + i, 2, 7 + i).with_counts(1, 3, 0);
        memory.add_story(render_contextual_story(&ev, 3.0, Granularity::Daily).unwrap()).unwrap();
    }
    let mut history = series_of(&[66; 16]);
    history.events[15] = day(15).with_ohlc(55, 70, 55, 66).with_counts(24, 10, 21);
    let p = predictor_predict(AgentId::Daily, base() + Days::new(15), &history, &memory, &StubBackend, &PredictorConfig::default())
        .unwrap();
    assert!(p.retrieved.iter().all(|r| r.document.story.target == Some(71.0)));
    assert_eq!(format!("{:.2}", p.value), "71.00");
}
