use paramdiff::par;
use paramdiff::tasks::{
    run_policy_training, CheckpointSink, ParamVector, PolicyHyper, TaskSpec,
};

struct Returns(Vec<f64>);

impl CheckpointSink for Returns {
    fn save(&mut self, _step: usize, _p: &ParamVector, m: &[f64]) -> paramdiff::Result<()> {
        self.0.push(m[0]);
        Ok(())
    }
}

#[test]
fn reinforce_improves_returns_on_most_seeds() {
    let arch = TaskSpec::cartpole().load().unwrap().arch;
    let hyper = PolicyHyper::default();
    let runs = par::map(5, |seed| {
        let mut sink = Returns(Vec::new());
        run_policy_training(&arch, &hyper, seed as u64, &mut sink).unwrap();
        sink.0
    });
    let improved = runs.iter().filter(|r| r.last() > r.first()).count();
    let mut spans: Vec<f64> = runs
        .iter()
        .map(|r| r.iter().cloned().fold(f64::MIN, f64::max) - r.iter().cloned().fold(f64::MAX, f64::min))
        .collect();
    spans.sort_by(f64::total_cmp);
    eprintln!("returns: {:?}", runs.iter().map(|r| (r[0], *r.last().unwrap())).collect::<Vec<_>>());
    assert!(improved >= 4, "{improved}/5 seeds improved");
    assert!(spans[2] > 50.0, "median return span {}", spans[2]);
}
