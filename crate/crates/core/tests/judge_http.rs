//! HTTP judge client against the in-process stub server.

use scenecap::tts::{
    stub_rewards, HttpJudge, HttpJudgeConfig, Judge, JudgeRequest, JudgeStub, MockJudge, SceneSummary, StubConfig,
    StubMode, VerdictStatus, RUBRIC_ID,
};
use scenecap::Error;

fn summary() -> SceneSummary {
    let descriptors = vec!["red chair".to_string(), "wooden table".to_string()];
    SceneSummary { rendered: descriptors.join(", "), similarities: vec![0.9, 0.8], descriptors }
}

fn candidates() -> Vec<String> {
    ["a red chair near a wooden table", "a blue lamp", "a red lamp"].map(String::from).to_vec()
}

fn judge(stub: &JudgeStub, f: impl FnOnce(&mut HttpJudgeConfig)) -> HttpJudge {
    let mut cfg = HttpJudgeConfig { backoff_ms: 5, ..HttpJudgeConfig::new(stub.endpoint()) };
    f(&mut cfg);
    HttpJudge::new(cfg).unwrap()
}

#[test]
fn mock_mode_over_http_matches_local_mock() {
    let stub = JudgeStub::spawn(StubConfig { mode: StubMode::Mock, delay_ms: 0 }, 0).unwrap();
    let remote = judge(&stub, |_| {}).score(&summary(), &candidates()).unwrap();
    let local = MockJudge.score(&summary(), &candidates()).unwrap();
    for (r, l) in remote.iter().zip(&local) {
        assert_eq!(r.status, VerdictStatus::Ok);
        assert_eq!(r.reward, l.reward);
    }
    assert_eq!(stub.received().len(), 1);
}

#[test]
fn per_candidate_mode_sends_one_request_each() {
    let stub = JudgeStub::spawn(StubConfig { mode: StubMode::Hashed, delay_ms: 0 }, 0).unwrap();
    let batched = judge(&stub, |_| {}).score(&summary(), &candidates()).unwrap();
    let single = judge(&stub, |c| {
        c.per_candidate = true;
        c.max_in_flight = 2;
    })
    .score(&summary(), &candidates())
    .unwrap();
    assert_eq!(stub.received().len(), 1 + candidates().len());
    for (i, v) in single.iter().enumerate() {
        assert_eq!(v.index, i);
        let want = stub_rewards(&StubMode::Hashed, &JudgeRequest::new(&summary(), &candidates()[i..=i]))[0];
        assert_eq!(v.reward, Some(want));
    }
    assert_eq!(batched.len(), single.len());
}

#[test]
fn server_errors_exhaust_retries_into_failures() {
    let stub = JudgeStub::spawn(StubConfig { mode: StubMode::Hashed, delay_ms: 0 }, 0).unwrap();
    let bad = HttpJudge::new(HttpJudgeConfig {
        endpoint: format!("{}/missing", stub.endpoint()),
        ..HttpJudgeConfig::new(stub.endpoint())
    })
    .unwrap();
    // 404 is not retried and surfaces as a protocol error.
    assert!(matches!(bad.score(&summary(), &candidates()), Err(Error::Protocol(_))));
    assert_eq!(stub.received().len(), 1, "a 404 must not be retried");

    let dead = HttpJudge::new(HttpJudgeConfig {
        retries: 2,
        backoff_ms: 1,
        timeout_ms: 300,
        ..HttpJudgeConfig::new("http://127.0.0.1:9")
    })
    .unwrap();
    let v = dead.score(&summary(), &candidates()).unwrap();
    assert!(v.iter().all(|v| v.status == VerdictStatus::Failed && v.error.is_some()));
}

#[test]
fn request_carries_rubric() {
    let stub = JudgeStub::spawn(StubConfig { mode: StubMode::Canned(vec![0.1, 0.2, 0.3]), delay_ms: 0 }, 0).unwrap();
    let v = judge(&stub, |_| {}).score(&summary(), &candidates()).unwrap();
    assert_eq!(v.iter().map(|v| v.reward.unwrap()).collect::<Vec<_>>(), [0.1, 0.2, 0.3]);
    let body: serde_json::Value = serde_json::from_str(&stub.received()[0]).unwrap();
    assert_eq!(body["rubric_id"], RUBRIC_ID);
    assert_eq!(body["summary"], "red chair, wooden table");
}
