use mixopt_core::analysis::{gap_report, rank_recompute_candidates, truth_loss, tv_distance};
use mixopt_core::domain::{apply_update, natural_distribution, repetition_caps, Domain, DomainSet, DomainUpdate, Mixture, NamedMixture, RepetitionBudget};
use mixopt_core::oracle::{truth_optimum, GroundTruthModel};
use mixopt_core::pipeline::base::BaseConfig;
use mixopt_core::reuse::{full_mix_reuse, partial_mix_reuse, ReusePlan};
use mixopt_core::swarm::scheduled_swarm_size;

fn cfg(plan: &ReusePlan, seed: u64) -> BaseConfig {
    BaseConfig::new(scheduled_swarm_size(plan.collapsed_dim(), 3), seed)
}

fn add_instance(seed: u64) -> (DomainSet, DomainSet, DomainUpdate, GroundTruthModel) {
    let pre = DomainSet::new((0..5).map(|j| Domain::new(format!("u{j}"), 1000 + 100 * j as u64)).collect()).unwrap();
    let update = DomainUpdate::add(vec![Domain::new("n0", 800), Domain::new("n1", 600)]);
    let post = apply_update(&pre, &update).unwrap().domains;
    let truth = GroundTruthModel::specialist(9, &post.ids(), 2.0, 0.3, 0.0, seed).unwrap();
    (pre, post, update, truth)
}

#[test]
fn reuse_with_optimal_ratios_matches_full_optimum() {
    for seed in 0..5 {
        let (pre, post, _, truth) = add_instance(seed);
        let best = truth_optimum(&truth, None, 0.0, &natural_distribution(&post).unwrap()).unwrap().mixture;
        let fix = pre.ids();
        let w: Vec<f64> = fix.iter().map(|id| best.weights()[post.index_of(id).unwrap()]).collect();
        let plan = ReusePlan::new(post.clone(), fix, Mixture::new(w).unwrap()).unwrap();
        let out = full_mix_reuse(&plan, &cfg(&plan, seed), &truth).unwrap();
        let tv = tv_distance(out.mixture.weights(), best.weights()).unwrap();
        assert!(tv <= 0.02, "seed {seed}: tv {tv}");
    }
}

#[test]
fn zero_capped_additions_leave_the_reused_mix_optimal() {
    let pre = DomainSet::from_pairs(&[("u0", 3000), ("u1", 2000), ("u2", 4000)]).unwrap();
    let update = DomainUpdate::add(vec![Domain::new("n0", 0)]);
    let post = apply_update(&pre, &update).unwrap().domains;
    let truth = GroundTruthModel::specialist(6, &post.ids(), 2.0, 0.3, 0.0, 4).unwrap();
    let budget = RepetitionBudget::new(1.0, 5000).unwrap();
    let p_tilde = truth_optimum(&truth.on(&pre).unwrap(), Some(repetition_caps(&pre, &budget).caps), 0.0, &Mixture::uniform(3))
        .unwrap()
        .mixture;
    let full = truth_optimum(&truth.on(&post).unwrap(), Some(repetition_caps(&post, &budget).caps), 0.0, &Mixture::uniform(4))
        .unwrap()
        .mixture;
    let plan = ReusePlan::new(post, pre.ids(), p_tilde).unwrap();
    let mut c = cfg(&plan, 1);
    c.budget = Some(budget);
    let reuse = full_mix_reuse(&plan, &c, &truth).unwrap();
    let rep = gap_report(&truth, &plan, &reuse.mixture, &full).unwrap();
    assert!(rep.one_minus_rho < 1e-9);
    assert!(rep.reuse_gap <= 1e-3, "{rep:?}");
}

/// Five unaffected domains; only `u0` helps the tasks the added domains serve.
fn coupled_truth() -> (DomainSet, DomainSet, GroundTruthModel) {
    let pre = DomainSet::new((0..5).map(|j| Domain::new(format!("u{j}"), 1000)).collect()).unwrap();
    let post = apply_update(&pre, &DomainUpdate::add(vec![Domain::new("n0", 1000), Domain::new("n1", 1000)]))
        .unwrap()
        .domains;
    // columns: n0 n1 u0 u1 u2 u3 u4
    let slopes = vec![
        vec![-4.0, 0.0, -1.5, 0.0, 0.0, 0.0, 0.0],
        vec![0.0, -4.0, -1.5, 0.0, 0.0, 0.0, 0.0],
        vec![0.0, 0.0, 0.0, -2.0, 0.0, 0.0, 0.0],
        vec![0.0, 0.0, 0.0, 0.0, -2.0, 0.0, 0.0],
        vec![0.0, 0.0, 0.0, 0.0, 0.0, -2.0, 0.0],
        vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, -2.0],
    ];
    let tasks = (0..6).map(|i| format!("t{i}")).collect();
    let truth = GroundTruthModel::new(tasks, post.ids(), vec![0.5; 6], slopes, 0.0).unwrap();
    (pre, post, truth)
}

#[test]
fn recomputing_the_coupled_domain_helps() {
    let (pre, post, truth) = coupled_truth();
    let added = vec!["n0".to_string(), "n1".to_string()];
    let ranked = rank_recompute_candidates(&truth, &pre.ids(), &added).unwrap();
    assert_eq!(ranked[0].id, "u0");
    assert!(ranked[0].delta_kappa >= 2.0 * ranked[1].delta_kappa, "{ranked:?}");

    let p_tilde = truth_optimum(&truth.on(&pre).unwrap(), None, 0.0, &Mixture::uniform(5)).unwrap().mixture;
    let prev = NamedMixture::new(&pre, &p_tilde);
    let best = truth_optimum(&truth, None, 0.0, &Mixture::uniform(7)).unwrap().mixture;
    let f_best = truth_loss(&truth, best.weights());

    let full_plan = ReusePlan::from_previous(post.clone(), &prev, vec![pre.ids()]).unwrap();
    let full = full_mix_reuse(&full_plan, &cfg(&full_plan, 2), &truth).unwrap();
    let rest: Vec<String> = pre.ids().into_iter().filter(|id| id != "u0").collect();
    let part_cfg = BaseConfig::new(scheduled_swarm_size(4, 3), 2);
    let partial = partial_mix_reuse(&post, &prev, &pre.ids(), vec![rest], &part_cfg, &truth).unwrap();
    let gap_full = truth_loss(&truth, full.mixture.weights()) - f_best;
    let gap_partial = truth_loss(&truth, partial.mixture.weights()) - f_best;
    println!("gap full {gap_full:.3e} partial {gap_partial:.3e}");
    assert!(gap_partial < gap_full);
}
