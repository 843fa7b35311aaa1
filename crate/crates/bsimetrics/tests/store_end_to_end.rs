use std::fs::File;
use std::io::BufReader;

use bsimetrics::core::engine::reference::Reference;
use bsimetrics::core::engine::{bind, exposed_units, parse_predicate, pre_experiment, run_query, Agg, PreAggCache, Query};
use bsimetrics::core::model::{Catalog, HashConfig, MetricId, StrategyId};
use bsimetrics::generate::GenSpec;
use bsimetrics::ingest::{ingest, parse, IngestOptions, TableKind};
use bsimetrics::report::{scorecard, ScorecardRequest};
use bsimetrics::Store;

#[test]
fn store_backed_queries_equal_the_reference() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = GenSpec {
        units: 3000,
        metrics: 2,
        days: 4,
        pre_days: 3,
        seed: 11,
        ..GenSpec::default()
    };
    spec.write_tsv(&tmp.path().join("logs")).unwrap();

    let root = tmp.path().join("root");
    let mut store = Store::init(&root, Catalog::new(HashConfig::new(8, 64).unwrap())).unwrap();
    for kind in [TableKind::Expose, TableKind::Metric, TableKind::Dimension] {
        let f = BufReader::new(File::open(tmp.path().join(format!("logs/{kind}.tsv"))).unwrap());
        let parsed = parse(kind, f, store.catalog()).unwrap();
        ingest(&mut store, parsed, IngestOptions::default()).unwrap();
    }
    // Reopen so every read goes through the files.
    let store = Store::open(&root).unwrap();

    let g = spec.generate().unwrap();
    let reference = Reference::new(store.catalog(), &g.expose, &g.metric, &g.dimension);
    let dates = spec.experiment_dates();
    let last = *dates.last().unwrap();
    let expr = parse_predicate("client-type >= 2 AND os != \"web\"").unwrap();
    let pred = bind(&expr, store.catalog()).unwrap();

    for s in 1..=spec.strategies {
        let strategy = StrategyId(u64::from(s));
        assert_eq!(
            exposed_units(&store, strategy, last, None).unwrap(),
            reference.exposed_units(strategy, last, None)
        );
        for m in 1..=spec.metrics {
            let metric = MetricId(u64::from(m));
            for agg in [Agg::Sum, Agg::Count, Agg::UniqueUnits] {
                for filter in [None, Some(dates[1])] {
                    let q = Query {
                        strategy,
                        metric,
                        dates: &dates,
                        agg,
                        filter: filter.map(|d| (&pred, d)),
                    };
                    assert_eq!(
                        run_query(&store, &q).unwrap(),
                        reference.scorecard(strategy, metric, &dates, agg, filter.map(|d| (&expr, d))),
                        "strategy {s} metric {m} {agg:?} filter {filter:?}"
                    );
                }
            }
            let mut cache = PreAggCache::new(1 << 26);
            assert_eq!(
                pre_experiment(&store, &mut cache, strategy, metric, dates[0], 3, last).unwrap(),
                reference.pre_experiment(strategy, metric, dates[0], 3, last)
            );
        }
    }

    let mut cache = PreAggCache::new(1 << 26);
    let rows = scorecard(
        &store,
        &mut cache,
        &ScorecardRequest {
            strategies: vec![StrategyId(1), StrategyId(2), StrategyId(3)],
            control: Some(StrategyId(1)),
            metrics: vec![MetricId(1)],
            dates: dates.clone(),
            agg: Agg::Sum,
            filter: None,
            cuped_days: Some(3),
        },
    )
    .unwrap();
    // Control row, then plain and CUPED rows per treatment.
    assert_eq!(rows.len(), 5);
}
