use aarm_conform::fixture::shipped;
use aarm_conform::harness::Harness;
use aarm_conform::report::{Status, EXTENDED};
use aarm_conform::{run, RunOptions};

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn reference_gateway_reaches_extended() {
    let h = Harness::self_hosted().await.unwrap();
    let report = run(&h, &shipped(), &RunOptions::default()).await.unwrap();
    println!("{}", report.to_text());
    assert_eq!(report.level, EXTENDED);
    assert!(report.success());
    let r9 = report.requirements.iter().find(|r| r.id == "R9").unwrap();
    assert_eq!((r9.status, r9.reason.as_deref()), (Status::Skipped, Some("out of scope")));
    assert_eq!(report.scenarios.len(), 7);
    assert!(report.scenarios.iter().all(|s| s.status == Status::Pass));
}

