use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use proptest::prelude::*;

use trafficpref::caption::CaptionFields;
use trafficpref::judge::{build_pref_dataset, CongestionScale, HttpJudge, Judge, JudgeError, Margins, Profile, SyntheticJudge, Verdict};
use trafficpref::pairs::{collect_pool, sample_pairs, sampler_rng, CollectConfig, PairingConfig};
use trafficpref::sim::{Phase, SimConfig};

fn fields() -> impl Strategy<Value = CaptionFields> {
    (prop::array::uniform4(0u32..25), 0u32..900, 0u32..1000, 0u32..5, any::<bool>()).prop_map(|(q, delay, ttc, brakes, red_risk)| CaptionFields {
        phase: Phase::NsStraight,
        elapsed: 10,
        q,
        p: [0; 4],
        delay: f64::from(delay) / 10.0,
        thru: 3,
        ttc_p10: f64::from(ttc) / 100.0,
        ttc_p50: 10.0,
        brakes,
        red_risk,
        near_v: 5.0,
        near_a: 0.0,
        near_d: 20.0,
    })
}

fn judge(p: Profile) -> SyntheticJudge {
    SyntheticJudge::new(p, Margins::default(), CongestionScale::default())
}

proptest! {
    #[test]
    fn swapping_flips_the_verdict(a in fields(), b in fields()) {
        for p in Profile::ALL {
            let j = judge(p);
            prop_assert_eq!(j.judge_fields(&a, &b), j.judge_fields(&b, &a).flipped());
        }
    }

    #[test]
    fn dominant_caption_wins_everywhere(b in fields(), dq in prop::array::uniform4(0u32..5), dd in 0u32..100, gain in 50u32..300) {
        let mut a = b.clone();
        a.red_risk = false;
        a.ttc_p10 = b.ttc_p10 + f64::from(gain) / 100.0;
        a.q = std::array::from_fn(|i| b.q[i].saturating_sub(dq[i]));
        a.delay = (b.delay - f64::from(dd) / 10.0).max(0.0);
        a.brakes = b.brakes.saturating_sub(1);
        for p in Profile::ALL {
            prop_assert_eq!(judge(p).judge_fields(&a, &b), Verdict::First, "{:?}", p);
        }
    }

    #[test]
    fn verdicts_depend_only_on_fields(a in fields(), b in fields()) {
        let mut j = judge(Profile::Balanced);
        let v = j.judge(&a.render(), &b.render()).unwrap();
        prop_assert_eq!(v, j.judge_fields(&a, &b));
    }
}

fn read_request(stream: &mut std::net::TcpStream) -> serde_json::Value {
    let mut reader = BufReader::new(stream);
    let mut len = 0;
    loop {
        let mut line = String::new();
        reader.read_line(&mut line).unwrap();
        if line == "\r\n" || line.is_empty() {
            break;
        }
        if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
            len = v.trim().parse().unwrap();
        }
    }
    let mut body = vec![0; len];
    reader.read_exact(&mut body).unwrap();
    serde_json::from_slice(&body).unwrap()
}

/// Prefers the shorter caption; counts the requests it serves.
fn serve(listener: TcpListener, hits: Arc<AtomicUsize>) {
    for stream in listener.incoming() {
        let Ok(mut stream) = stream else { break };
        let hits = hits.clone();
        thread::spawn(move || {
            let req = read_request(&mut stream);
            hits.fetch_add(1, Ordering::SeqCst);
            assert_eq!(req["prompt_template_id"], "pairwise-v1");
            let (c1, c2) = (req["c1"].as_str().unwrap(), req["c2"].as_str().unwrap());
            let verdict = match c1.len().cmp(&c2.len()) {
                std::cmp::Ordering::Less => "1",
                std::cmp::Ordering::Greater => "2",
                std::cmp::Ordering::Equal => "abstain",
            };
            let body = format!(r#"{{"verdict":"{verdict}"}}"#);
            write!(stream, "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}", body.len()).unwrap();
        });
    }
}

fn start_server() -> (String, Arc<AtomicUsize>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/judge", listener.local_addr().unwrap());
    let hits = Arc::new(AtomicUsize::new(0));
    let h = hits.clone();
    thread::spawn(move || serve(listener, h));
    (url, hits)
}

#[test]
fn http_judge_round_trip_and_cache() {
    let (url, hits) = start_server();
    let cache = tempfile::tempdir().unwrap();
    let mut j = HttpJudge::new(&url, "pairwise-v1");
    j.cache_dir = Some(cache.path().to_path_buf());
    assert_eq!(j.judge("ab", "abc").unwrap(), Verdict::First);
    assert_eq!(j.judge("abcd", "abc").unwrap(), Verdict::Second);
    assert_eq!(j.judge("xyz", "abc").unwrap(), Verdict::Abstain);
    assert_eq!(hits.load(Ordering::SeqCst), 3);
    assert_eq!(j.judge("ab", "abc").unwrap(), Verdict::First);
    assert_eq!(hits.load(Ordering::SeqCst), 3, "repeat query must come from the cache");
    assert_eq!(std::fs::read_dir(cache.path()).unwrap().count(), 3);
}

#[test]
fn http_judge_batches_keep_order() {
    let (url, hits) = start_server();
    let mut j = HttpJudge::new(&url, "pairwise-v1");
    j.max_in_flight = 4;
    let pairs: Vec<(String, String)> = (0..10).map(|k| ("x".repeat(k), "x".repeat(5))).collect();
    let got: Vec<Verdict> = j.judge_batch(&pairs).into_iter().map(Result::unwrap).collect();
    let want: Vec<Verdict> = (0..10)
        .map(|k| match k {
            0..5 => Verdict::First,
            5 => Verdict::Abstain,
            _ => Verdict::Second,
        })
        .collect();
    assert_eq!(got, want);
    assert_eq!(hits.load(Ordering::SeqCst), 10);
}

#[test]
fn http_judge_labels_a_dataset() {
    let (url, _) = start_server();
    let env = SimConfig {
        horizon_s: 120.0,
        ..SimConfig::default()
    };
    let pool = collect_pool(&env, &CollectConfig { episodes: 1, ..CollectConfig::default() }, 3).unwrap();
    let sampled = sample_pairs(&pool, 40, &PairingConfig::default(), &mut sampler_rng(3)).unwrap();
    let mut j = HttpJudge::new(&url, "pairwise-v1");
    let (records, report) = build_pref_dataset(&pool, &sampled, &mut j).unwrap();
    assert_eq!(report.sampled, 40);
    assert_eq!(records.len() + report.abstained, 40);
    for r in &records {
        assert_eq!(r.y == 1, r.c1.len() < r.c2.len());
        assert_eq!(r.judge_meta.judge, "http:pairwise-v1");
    }
}

#[test]
fn unreachable_endpoint_is_a_transport_error() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let mut j = HttpJudge::new(format!("http://127.0.0.1:{port}/judge"), "pairwise-v1");
    j.attempts = 2;
    j.timeout = Duration::from_secs(2);
    match j.judge("a", "b") {
        Err(JudgeError::Transport { attempts, .. }) => assert_eq!(attempts, 2),
        other => panic!("expected a transport error, got {other:?}"),
    }
}

#[test]
fn malformed_response_is_reported() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/", listener.local_addr().unwrap());
    thread::spawn(move || {
        let (mut s, _) = listener.accept().unwrap();
        read_request(&mut s);
        let body = r#"{"verdict":"maybe"}"#;
        write!(s, "HTTP/1.1 200 OK\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}", body.len()).unwrap();
    });
    let mut j = HttpJudge::new(url, "pairwise-v1");
    assert!(matches!(j.judge("a", "b"), Err(JudgeError::Response(_))));
}
