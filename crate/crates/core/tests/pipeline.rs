use qte_core::agent::{read_demos, write_demos, Agent, AgentConfig, ExpansionMode};
use qte_core::env::{generate, scripted_expert, SceneSpec, TaskEnv};
use qte_core::qmodel::{load_checkpoint, save_checkpoint};

fn demos(spec: &SceneSpec, n: u64) -> Vec<qte_core::agent::Demo> {
    (0..n).map(|s| scripted_expert(&generate(spec, s).unwrap())).collect()
}

#[test]
fn ten_demos_fill_buffer_with_demo_transitions() {
    let spec = SceneSpec::preset("reach_ambiguous_k3").unwrap();
    let mut agent = Agent::new(AgentConfig::default(), 0).unwrap();
    let n = agent.ingest_demos(&demos(&spec, 10)).unwrap();
    assert_eq!(n, 30);
    assert_eq!(agent.buffer().len(), n);
    assert!(agent.buffer().iter().all(|t| t.is_demo && t.terminal && t.reward == 100.0));
}

#[test]
fn demo_file_survives_round_trip_into_training() {
    let spec = SceneSpec::preset("stack2_ambiguous").unwrap();
    let original = demos(&spec, 3);
    let mut buf = Vec::new();
    write_demos(&original, &mut buf).unwrap();
    let loaded = read_demos(buf.as_slice()).unwrap();
    assert_eq!(loaded, original);

    let cfg = AgentConfig {
        batch_size: 8,
        ..Default::default()
    };
    let mut a = Agent::new(cfg.clone(), 1).unwrap();
    let mut b = Agent::new(cfg, 1).unwrap();
    a.ingest_demos(&original).unwrap();
    b.ingest_demos(&loaded).unwrap();
    for _ in 0..3 {
        assert_eq!(a.train_step().unwrap(), b.train_step().unwrap());
    }
}

#[test]
fn checkpoint_restores_greedy_behaviour() {
    let spec = SceneSpec::preset("reach_ambiguous_k3").unwrap();
    let cfg = AgentConfig {
        batch_size: 8,
        mode: ExpansionMode::Both,
        ..Default::default()
    };
    let mut trained = Agent::new(cfg.clone(), 2).unwrap();
    trained.ingest_demos(&demos(&spec, 4)).unwrap();
    let mut env = TaskEnv::new(spec.clone()).unwrap();
    for s in 0..20 {
        trained.run_episode(&mut env, s, true).unwrap();
    }
    let mut bytes = Vec::new();
    save_checkpoint(trained.online(), &mut bytes).unwrap();
    let mut fresh = Agent::new(cfg, 99).unwrap();
    load_checkpoint(fresh.online_mut(), bytes.as_slice()).unwrap();
    for s in 0..10 {
        let obs = generate(&spec, 500 + s).unwrap().observe(false);
        assert_eq!(trained.greedy(&obs).unwrap().action, fresh.greedy(&obs).unwrap().action);
    }
}
