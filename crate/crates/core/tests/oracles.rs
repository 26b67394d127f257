mod common;

use common::{dsp_oracle_report, metric_oracle_mismatches};

#[test]
fn front_end_matches_naive_dft_and_mel_loops() {
    let r = dsp_oracle_report(100, 11);
    println!("{r:?}");
    assert!(r.pass(), "{r:?}");
}

#[test]
fn ranking_metrics_match_enumeration() {
    assert_eq!(metric_oracle_mismatches(1000, 3), 0);
}
