use std::sync::Arc;

use chrono::{Days, NaiveDate};
use proptest::prelude::*;
use wipcast_core::memory::{doc_id_for, rank_order, MemoryDocument, MemoryError};
use wipcast_core::narrative::{read_jsonl, render_series, write_jsonl, StoryFacts};
use wipcast_core::{
    cosine, render_contextual_story, render_query_story, render_windowed_story, EmbeddingProvider, EmbeddingVector,
    FlatIndex, Granularity, HashingEmbedder, ProcessMemory, Retention, Story, StoryKind, WipEvent, WipSeries,
};

fn d(s: &str) -> NaiveDate {
    s.parse().unwrap()
}

fn base() -> NaiveDate {
    d("2024-01-01")
}

fn example_day() -> WipEvent {
    WipEvent::on(d("2024-03-12")).with_ohlc(55, 70, 55, 66).with_counts(24, 10, 21)
}

#[test]
fn daily_sentences_render_exactly() {
    let ev = example_day();
    assert_eq!(
        render_query_story(&ev, Granularity::Daily).unwrap().text,
        "The WiP items opened at 55, reached a high of 70 and a low of 55, before closing at 66, \
         with 10 items completed, 24 new items added, and 21 items started."
    );
    let ctx = render_contextual_story(&ev, 71.0, Granularity::Daily).unwrap();
    assert_eq!(
        ctx.text,
        "The WiP items opened at 55, reached a high of 70 and a low of 55, before closing at 66, \
         with 10 items completed, 24 new items added, and 21 items started, \
         while the next WiP was expected to remain at 71."
    );
    assert_eq!((ctx.kind, ctx.target), (StoryKind::Contextual, Some(71.0)));
    let wk = render_query_story(&ev, Granularity::Weekday).unwrap();
    assert!(wk.text.starts_with("On Tuesday, the WiP items opened at 55"), "{}", wk.text);
}

#[test]
fn series_story_counts() {
    let events: Vec<WipEvent> = (0..10).map(|i| WipEvent::flat(base() + Days::new(i), 5 + i)).collect();
    let s = WipSeries {
        events,
        lifecycle: Default::default(),
        timezone: chrono_tz::UTC,
        contiguous: true,
        diagnostics: vec![],
    };
    let all = render_series(&s, Granularity::Daily, 7);
    assert_eq!(all.len(), 19);
    let daily: Vec<Story> = all.into_iter().filter(|s| s.kind == StoryKind::Contextual).collect();
    assert_eq!(daily.len(), 9);
    assert_eq!(daily[0].target, Some(6.0));
    let windowed: Vec<Story> = render_series(&s, Granularity::Windowed, 7)
        .into_iter()
        .filter(|s| s.kind == StoryKind::Contextual)
        .collect();
    // windows end on days 7..=10 (1-based); the last has no next close
    assert_eq!(windowed.len(), 3);
    assert_eq!(windowed[0].date, base() + Days::new(6));

    let mut buf = Vec::new();
    write_jsonl(&daily, &mut buf).unwrap();
    assert_eq!(read_jsonl(buf.as_slice()).unwrap(), daily);
}

fn wip_event() -> impl Strategy<Value = WipEvent> {
    (0u32..3000, 0u64..10_000, 0u64..500, 0u64..500, 0u64..500).prop_map(|(off, a, b, c, e)| {
        let low = a;
        let high = a + b;
        WipEvent::on(base() + Days::new(off as u64))
            .with_ohlc(low + c.min(b), high, low, low + e.min(b))
            .with_counts(b, c, e)
    })
}

proptest! {
    #[test]
    fn day_stories_parse_back(ev in wip_event(), target in proptest::option::of(0u64..100_000), weekday in any::<bool>()) {
        let g = if weekday { Granularity::Weekday } else { Granularity::Daily };
        let story = match target {
            Some(t) => render_contextual_story(&ev, t as f64, g).unwrap(),
            None => render_query_story(&ev, g).unwrap(),
        };
        let f = StoryFacts::parse(&story.text).unwrap();
        prop_assert_eq!(
            f.state(),
            [ev.open, ev.high, ev.low, ev.close, ev.done, ev.new, ev.started].map(|x| x as f64)
        );
        prop_assert_eq!(f.target, target.map(|t| t as f64));
        prop_assert_eq!(f.weekday.as_deref(), weekday.then(|| ev.weekday_name()));
    }

    #[test]
    fn windowed_stories_parse_back(days in proptest::collection::vec(wip_event(), 1..10), target in proptest::option::of(0.0f64..1e4)) {
        let target = target.map(|t| (t * 100.0).round() / 100.0);
        let story = render_windowed_story(&days, target).unwrap();
        let f = StoryFacts::parse(&story.text).unwrap();
        prop_assert_eq!(f.window_days, Some(days.len() as u64));
        prop_assert_eq!(f.open, days[0].open as f64);
        prop_assert_eq!(f.close, days.last().unwrap().close as f64);
        prop_assert_eq!(f.low, days.iter().map(|e| e.low).min().unwrap() as f64);
        prop_assert_eq!(f.high, days.iter().map(|e| e.high).max().unwrap() as f64);
        prop_assert_eq!(f.new, days.iter().map(|e| e.new).sum::<u64>() as f64);
        prop_assert_eq!(f.target, target);
        prop_assert_eq!(story.date, days.last().unwrap().date);
    }
}

fn dense(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn oracle_cosine(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (dense(a) * dense(b))
}

fn doc(day: u64, granularity: Granularity, emb: Vec<f64>) -> MemoryDocument {
    let story = Story {
        date: base() + Days::new(day),
        kind: StoryKind::Contextual,
        granularity,
        text: format!("story {day}"),
        target: Some(day as f64),
    };
    MemoryDocument::new(story, EmbeddingVector::new(emb).unwrap()).unwrap()
}

/// Exhaustive ranking with ties broken on (date desc, id asc).
fn oracle_search(docs: &[MemoryDocument], q: &[f64], as_of: NaiveDate, k: usize) -> Vec<(String, f64)> {
    let mut all: Vec<(f64, NaiveDate, String)> = docs
        .iter()
        .filter(|x| x.story.date < as_of)
        .map(|x| (oracle_cosine(q, x.embedding.values()), x.story.date, x.doc_id.clone()))
        .collect();
    all.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap()
            .then(b.1.cmp(&a.1))
            .then(a.2.cmp(&b.2))
    });
    all.into_iter().take(k).map(|(s, _, id)| (id, s)).collect()
}

fn nonzero_vec(dim: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-4i32..5, dim)
        .prop_filter("nonzero", |v| v.iter().any(|x| *x != 0))
        .prop_map(|v| v.into_iter().map(f64::from).collect())
}

proptest! {
    #[test]
    fn search_matches_exhaustive_scan(
        vecs in proptest::collection::vec(nonzero_vec(4), 1..60),
        q in nonzero_vec(4),
        as_of in 0u64..70,
        k in 1usize..8,
    ) {
        // small integer coordinates produce many exact similarity ties
        let docs: Vec<MemoryDocument> = vecs
            .into_iter()
            .enumerate()
            .map(|(i, v)| doc(i as u64, if i % 2 == 0 { Granularity::Daily } else { Granularity::Weekday }, v))
            .collect();
        let mut index = FlatIndex::new();
        for x in &docs {
            index.add(x.clone()).unwrap();
        }
        let as_of = base() + Days::new(as_of);
        let got = index.search(&EmbeddingVector::new(q.clone()).unwrap(), as_of, k, &Retention::default()).unwrap();
        let want = oracle_search(&docs, &q, as_of, k);
        prop_assert_eq!(got.len(), want.len());
        for (g, (id, s)) in got.iter().zip(&want) {
            prop_assert!(g.document.story.date < as_of);
            prop_assert!((g.similarity - s).abs() < 1e-12);
            // tied similarities may differ in the last ulp, so compare ids only when separated
            if (g.similarity - s).abs() == 0.0 {
                prop_assert_eq!(&g.document.doc_id, id);
            }
        }
        for w in got.windows(2) {
            let key = |r: &wipcast_core::memory::RetrievalResult| (r.similarity, r.document.story.date, r.document.doc_id.clone());
            let (a, b) = (key(&w[0]), key(&w[1]));
            prop_assert!(rank_order((a.0, a.1, &a.2), (b.0, b.1, &b.2)).is_le());
        }
    }

    #[test]
    fn cosine_is_symmetric_and_bounded(a in nonzero_vec(6), b in nonzero_vec(6)) {
        let (u, v) = (EmbeddingVector::new(a.clone()).unwrap(), EmbeddingVector::new(b.clone()).unwrap());
        let s = cosine(&u, &v).unwrap();
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&s));
        prop_assert_eq!(s, cosine(&v, &u).unwrap());
        prop_assert!((s - oracle_cosine(&a, &b)).abs() < 1e-12);
        prop_assert!((cosine(&u, &u).unwrap() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn duplicated_embeddings_rank_by_date_then_id() {
    let mut index = FlatIndex::new();
    for day in [3, 9, 5] {
        index.add(doc(day, Granularity::Daily, vec![1.0, 1.0])).unwrap();
    }
    index.add(doc(9, Granularity::Weekday, vec![1.0, 1.0])).unwrap();
    let got = index
        .search(&EmbeddingVector::new(vec![2.0, 2.0]).unwrap(), base() + Days::new(20), 10, &Retention::default())
        .unwrap();
    let ids: Vec<&str> = got.iter().map(|r| r.document.doc_id.as_str()).collect();
    assert_eq!(ids, ["daily:2024-01-10", "weekday:2024-01-10", "daily:2024-01-06", "daily:2024-01-04"]);
}

#[test]
fn as_of_is_exclusive_and_empty_index_returns_nothing() {
    let mut index = FlatIndex::new();
    let q = EmbeddingVector::new(vec![1.0, 0.0]).unwrap();
    assert!(index.search(&q, base(), 5, &Retention::default()).unwrap().is_empty());
    index.add(doc(4, Granularity::Daily, vec![1.0, 0.0])).unwrap();
    assert!(index.search(&q, base() + Days::new(4), 5, &Retention::default()).unwrap().is_empty());
    assert_eq!(index.search(&q, base() + Days::new(5), 5, &Retention::default()).unwrap().len(), 1);
}

#[test]
fn index_rejects_bad_vectors() {
    let mut index = FlatIndex::new();
    index.add(doc(1, Granularity::Daily, vec![1.0, 0.0])).unwrap();
    assert!(matches!(
        index.add(doc(2, Granularity::Daily, vec![1.0, 0.0, 0.0])),
        Err(MemoryError::DimensionMismatch { expected: 2, got: 3 })
    ));
    assert!(matches!(index.add(doc(3, Granularity::Daily, vec![0.0, 0.0])), Err(MemoryError::ZeroNorm)));
    let q = EmbeddingVector::new(vec![1.0]).unwrap();
    assert!(index.search(&q, base() + Days::new(9), 1, &Retention::default()).is_err());
}

#[test]
fn retention_limits_candidates() {
    let mut index = FlatIndex::new();
    index.add(doc(1, Granularity::Daily, vec![1.0, 0.0])).unwrap();
    index.add(doc(8, Granularity::Daily, vec![0.0, 1.0])).unwrap();
    let q = EmbeddingVector::new(vec![1.0, 0.0]).unwrap();
    let as_of = base() + Days::new(10);
    let recent = Retention {
        recent_days: Some(5),
        min_similarity: None,
    };
    let got = index.search(&q, as_of, 5, &recent).unwrap();
    assert_eq!(got.len(), 1);
    assert_eq!(got[0].document.story.date, base() + Days::new(8));
    let similar = Retention {
        recent_days: None,
        min_similarity: Some(0.5),
    };
    let got = index.search(&q, as_of, 5, &similar).unwrap();
    assert_eq!(got.len(), 1);
    assert_eq!(got[0].document.story.date, base() + Days::new(1));
}

#[test]
fn snapshot_round_trip_preserves_search() {
    let provider: Arc<dyn EmbeddingProvider> = Arc::new(HashingEmbedder::default());
    let mut memory = ProcessMemory::new(Granularity::Daily, provider, Retention::default());
    let stories: Vec<Story> = (0..12u64)
        .map(|i| {
            let ev = WipEvent::on(base() + Days::new(i)).with_ohlc(10 + i, 20 + i, 5, 12 + i).with_counts(i, 2, 1);
            render_contextual_story(&ev, (13 + i) as f64, Granularity::Daily).unwrap()
        })
        .collect();
    memory.add_stories(stories.clone()).unwrap();
    assert_eq!(memory.len(), 12);
    assert_eq!(memory.index.get(&doc_id_for(&stories[3])).unwrap().story, stories[3]);

    let mut buf = Vec::new();
    memory.index.write_snapshot(&mut buf).unwrap();
    let restored = FlatIndex::read_snapshot(buf.as_slice()).unwrap();
    assert_eq!(restored.documents(), memory.index.documents());

    let q = render_query_story(&WipEvent::on(base() + Days::new(12)).with_ohlc(21, 30, 5, 24), Granularity::Daily).unwrap();
    let emb = HashingEmbedder::default().embed(&q.text).unwrap();
    let as_of = base() + Days::new(12);
    let a = memory.index.search(&emb, as_of, 5, &Retention::default()).unwrap();
    let b = restored.search(&emb, as_of, 5, &Retention::default()).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 5);
}

#[test]
fn hashing_embedder_is_deterministic_and_normalized() {
    let e = HashingEmbedder::default();
    let text = render_query_story(&example_day(), Granularity::Daily).unwrap().text;
    let a = e.embed(&text).unwrap();
    assert_eq!(a, e.embed(&text).unwrap());
    assert!((a.norm() - 1.0).abs() < 1e-12);
    assert_eq!(Some(a.dim()), e.dim());

    // nearer numbers embed nearer
    let near = render_query_story(&example_day().with_ohlc(56, 70, 55, 67), Granularity::Daily).unwrap().text;
    let far = render_query_story(&example_day().with_ohlc(5, 99, 1, 90), Granularity::Daily).unwrap().text;
    let sn = cosine(&a, &e.embed(&near).unwrap()).unwrap();
    let sf = cosine(&a, &e.embed(&far).unwrap()).unwrap();
    assert!(sn > sf, "{sn} vs {sf}");
}
