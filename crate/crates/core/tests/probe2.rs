// temporary probe: joint-density comparison of true vs sampled configurations
use iflds::learn::{learn, Chain, Hyper, IfldsState};
use iflds::model::{simulate_flds, FldsModel, InitialState};
use iflds::rng::RngHandle;

#[test]
#[ignore]
fn compare_modes() {
    let model = FldsModel::study_config(2).unwrap();
    let seed = 3u64;
    let mut rng = RngHandle::new(seed, 0);
    let (obs, xs) = simulate_flds(&model, 2000, InitialState::Random, &mut rng).unwrap();
    let hyper = Hyper::study_default(&obs, 1);

    // true configuration: planted params and latents
    let mut true_state = IfldsState::init_prior_chains(2000, hyper.clone(), 2, &mut rng).unwrap();
    for (m, chain) in true_state.chains.iter_mut().enumerate() {
        chain.x = xs[m].clone();
        chain.params = model.sources()[m].clone();
        chain.s = vec![true; 2000];
        chain.z = vec![true; 2000];
        chain.b = 0.99;
        chain.a = 0.5;
        chain.gamma = 0.9;
    }
    let ll_true = true_state.joint_log_likelihood(&obs).unwrap();

    let out = learn(&obs, &hyper, 120, 30, &mut rng).unwrap();
    let ll_sampled = out
        .point_estimate
        .joint_log_likelihood(&obs)
        .unwrap();
    let q = out.point_estimate.chains[0].params.q;
    let robs = out.point_estimate.obs_covariance();
    println!("ll_true = {ll_true:.1}, ll_sampled = {ll_sampled:.1} (m_hat {})", out.m_hat);
    println!("sampled Q = {q:.5}, sigma_obs = {robs:.5}");
    let active: Vec<usize> = out.point_estimate.chains.iter().map(Chain::active_steps).collect();
    println!("active steps = {active:?}");
}
