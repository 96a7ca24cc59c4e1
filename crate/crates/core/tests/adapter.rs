use faithcore::harness::evaluate::{evaluate_corpus, prepare, Role, Scope};
use faithcore::harness::RunConfig;
use faithcore::metrics::Metric;
use faithcore::model::adapter::{AdapterClient, AdapterEndpoint};
use faithcore::model::{embed, forward};
use faithcore::numerics::Matrix;
use faithcore::{Error, TransportError};

const FAITH: &str = env!("CARGO_BIN_EXE_faith");

fn shell(script: &str, timeout_ms: u64) -> AdapterEndpoint {
    AdapterEndpoint::new("sh", vec!["-c".into(), script.into()], timeout_ms).unwrap()
}

fn transport(e: Error) -> TransportError {
    match e {
        Error::Transport(t) => t,
        other => panic!("expected a transport error, got {other:?}"),
    }
}

#[test]
fn fixed_probability_adapter_answers_every_request() {
    let ep = AdapterEndpoint::new(FAITH, vec!["adapter".into(), "--fixed-probs".into(), "0.25,0.75".into()], 5000).unwrap();
    let mut client = AdapterClient::start(&ep).unwrap();
    assert!(client.provides("probs"));
    assert!(!client.provides("grads"));
    for t in 1..5 {
        let out = client.predict(&Matrix::zeros(t, 3)).unwrap();
        assert_eq!(out.probs, vec![0.25, 0.75]);
        assert!(out.attention.is_none() && out.grads.is_none());
    }
}

#[test]
fn built_in_model_over_the_wire_matches_in_process() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::default();
    cfg.synthetic.train_size = 200;
    cfg.synthetic.test_size = 30;
    cfg.fas = vec!["attention".parse().unwrap(), "random".parse().unwrap()];
    let prepared = prepare(&cfg).unwrap();
    let model = dir.path().join("model.json");
    prepared.params.save(&model).unwrap();

    let ep = AdapterEndpoint::new(FAITH, vec!["adapter".into(), "--model".into(), model.display().to_string()], 5000).unwrap();
    let mut client = AdapterClient::start(&ep).unwrap();
    for seq in prepared.eval.iter().take(10) {
        let x = embed(seq, &prepared.params).unwrap();
        let local = forward(&x, &prepared.params).unwrap();
        let remote = client.predict(&x).unwrap();
        for (a, b) in local.probs.iter().zip(&remote.probs) {
            assert!((a - b).abs() <= 1e-9);
        }
        assert_eq!(remote.attention.unwrap().len(), x.rows());
        assert_eq!(remote.grads.unwrap().shape(), x.shape());
    }
    drop(client);

    let local = evaluate_corpus(&cfg, &prepared.params, &prepared.eval).unwrap();
    cfg.adapter = Some(format!("{FAITH} adapter --model {}", model.display()));
    let remote = evaluate_corpus(&cfg, &prepared.params, &prepared.eval).unwrap();
    for fa in ["attention", "random"] {
        for metric in Metric::ALL {
            let scope = if metric.is_soft() { Scope::Soft } else { Scope::Aopc };
            let a = local.aggregate(Role::Fa, fa, metric, scope).unwrap().mean.unwrap();
            let b = remote.aggregate(Role::Fa, fa, metric, scope).unwrap().mean.unwrap();
            assert!((a - b).abs() <= 1e-9, "{fa} {metric}: {a} vs {b}");
        }
    }
}

#[test]
fn silent_adapter_times_out() {
    let ep = shell(r#"read l; echo '{"type":"ready","provides":["probs"]}'; sleep 5"#, 200);
    let mut client = AdapterClient::start(&ep).unwrap();
    let err = transport(client.predict(&Matrix::zeros(2, 2)).unwrap_err());
    assert!(matches!(err, TransportError::Timeout(200)));
}

#[test]
fn garbage_reply_is_malformed() {
    let ep = shell(r#"read l; echo '{"type":"ready","provides":["probs"]}'; read l; echo 'not json at all'; sleep 5"#, 2000);
    let mut client = AdapterClient::start(&ep).unwrap();
    let err = transport(client.predict(&Matrix::zeros(2, 2)).unwrap_err());
    assert!(matches!(err, TransportError::Malformed(_)), "{err:?}");
}

#[test]
fn exiting_adapter_is_reported() {
    let ep = shell(r#"read l; echo '{"type":"ready","provides":["probs"]}'; read l; exit 4"#, 2000);
    let mut client = AdapterClient::start(&ep).unwrap();
    let err = transport(client.predict(&Matrix::zeros(2, 2)).unwrap_err());
    assert!(matches!(err, TransportError::ProcessExit(_)), "{err:?}");
}

#[test]
fn out_of_contract_probabilities_are_rejected() {
    let ep = shell(
        r#"read l; echo '{"type":"ready","provides":["probs"]}'; read l; echo '{"type":"result","id":"1","probs":[0.5,0.7]}'; sleep 5"#,
        2000,
    );
    let mut client = AdapterClient::start(&ep).unwrap();
    let err = transport(client.predict(&Matrix::zeros(2, 2)).unwrap_err());
    assert!(matches!(err, TransportError::Validation(_)), "{err:?}");
}

#[test]
fn adapter_errors_exit_with_code_three() {
    let dir = tempfile::tempdir().unwrap();
    let out = std::process::Command::new(FAITH)
        .args(["evaluate", "--set", "test_size=5", "--set", "train_size=50", "--fas", "random", "--output"])
        .arg(dir.path().join("run"))
        .args(["--adapter", "sh -c exit"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}
