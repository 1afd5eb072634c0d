//! Deterministic inputs shared by the benchmarks.

use promptwatt::metrics::PrimaryAggregate;
use promptwatt::strategy::StrategyId;

/// `models` x 7 aggregates with costs that vary by strategy.
pub fn aggregate_grid(models: usize) -> Vec<PrimaryAggregate> {
    let mut out = Vec::with_capacity(models * 7);
    for m in 0..models {
        for s in StrategyId::ALL {
            let k = s.order() as f64 + m as f64 * 0.1;
            out.push(PrimaryAggregate {
                model: format!("model-{m}"),
                strategy: s,
                t: 200_000 + 13_000 * s.order() as u64,
                tau: 3_000.0 + 250.0 * k,
                co2: 0.05 + 0.004 * k,
                e_cpu: 0.03 + 0.002 * k,
                e_gpu: 0.08 + 0.006 * k,
                e_ram: 0.004,
                q: Some(0.75 + 0.03 * s.order() as f64),
            });
        }
    }
    out
}

/// A completion shaped like a chain-of-thought reply with a fenced script.
pub fn completion(asserts: usize, seed: usize) -> String {
    let mut s = String::from("Let us reason about the edge cases first.\n\n```python\nimport unittest\n\n");
    s.push_str("class TestGenerated(unittest.TestCase):\n    def test_cases(self):\n");
    for i in 0..asserts {
        s.push_str(&format!(
            "        self.assertEqual(f({}), {})\n",
            i + seed % 3,
            (i + seed % 3) * 2
        ));
    }
    s.push_str("```\nThese cover the main paths.\n");
    s
}

/// Self-consistency candidate pool with partial overlap.
pub fn candidates(k: usize, asserts: usize) -> Vec<String> {
    (0..k).map(|i| completion(asserts, i)).collect()
}
