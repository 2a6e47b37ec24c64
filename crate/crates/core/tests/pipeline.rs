use alphagrpo::config::{Config, RunConfig};
use alphagrpo::dvreward::{decompose, AnalyticVerifier};
use alphagrpo::envtoy::{generate_prompt_set, Catalog};
use alphagrpo::gradcore::Checkpoint;
use alphagrpo::grpotrain::{eval_suite, train, TaskMode};
use alphagrpo::model::{pretrain, ModelSpec, PolicyModel};
use alphagrpo::rewardserve::RewardClient;

fn run(text: &str) -> (Vec<u8>, Vec<u8>, String) {
    let cfg = RunConfig::from_config(&Config::parse(text).unwrap()).unwrap();
    let cat = Catalog::standard(cfg.data.tasks, cfg.data.dim).unwrap();
    let prompts = generate_prompt_set(&cat, cfg.data.per_task, cfg.data.tier_ratio, cfg.data.seed).unwrap();
    let qs: Vec<_> = prompts.iter().map(|p| decompose(p).unwrap()).collect();
    let spec = ModelSpec { ar_hidden: cfg.model.ar_hidden, flow_hidden: cfg.model.flow_hidden, ..ModelSpec::for_catalog(&cat) };
    let model = PolicyModel::new(spec.clone());
    let mut params = model.init_params(cfg.seed);
    pretrain(&model, &mut params, &prompts, &cfg.pretrain).unwrap();
    let client = RewardClient::local(AnalyticVerifier::default(), 3);
    let art = train(&model, &params, &prompts, &qs, &cfg.train, &client, &mut |_, _, _| Ok(())).unwrap();
    let metrics: Vec<u8> = art.metrics.iter().flat_map(|m| serde_json::to_vec(m).unwrap()).collect();
    let mut ck = Vec::new();
    Checkpoint::new(spec, art.params.clone(), Some(art.optimizer.clone())).write(&mut ck).unwrap();
    let eval = eval_suite(&model, &art.params, &prompts, &qs, &cfg.train, &client, cfg.train.mode == TaskMode::Srr).unwrap();
    (metrics, ck, serde_json::to_string(&eval).unwrap())
}

const SMALL: &str = "data.tasks = 3\ndata.per_task = 3\nmodel.ar_hidden = 8\nmodel.flow_hidden = 8\n\
pretrain.flow_steps = 30\npretrain.ar_steps = 5\ngrpo.steps = 3\ngrpo.prompts_per_step = 4\ngrpo.mini_batches = 2\n";

#[test]
fn training_is_a_pure_function_of_config() {
    for mode in ["rt2i", "srr"] {
        let text = format!("{SMALL}grpo.mode = {mode}\nseed = 4\n");
        let a = run(&text);
        let b = run(&text);
        assert_eq!(a, b, "{mode}");
        let other = run(&format!("{SMALL}grpo.mode = {mode}\nseed = 5\n"));
        assert_ne!(a.0, other.0, "{mode}: seed must matter");
    }
}

#[test]
fn checkpoint_round_trips_exactly() {
    let (_, bytes, _) = run(SMALL);
    let ck: Checkpoint<ModelSpec> = Checkpoint::read(bytes.as_slice()).unwrap();
    let mut again = Vec::new();
    ck.write(&mut again).unwrap();
    assert_eq!(bytes, again);
    assert!(Checkpoint::<ModelSpec>::read(&b"{\"format\":\"other/9\"}"[..]).is_err());
}
