//! Independent loop-based GE2E reference. Deliberately shares no code with
//! the library: centroids, cosines, similarities and the softmax loss are
//! all spelled out with bare loops, then compared against both library
//! routes (plain and tape) on random small batches.

use eatts::autodiff::{Graph, Shape, Tensor};
use eatts::ge2e::{ge2e_loss, ge2e_loss_graph, EmbeddingBatch, Ge2eScale};
use eatts::rng::Rng;

const EPS: f64 = 1e-12;

/// Brute-force GE2E loss: explicit loops only.
fn brute_force_loss(
    groups: usize,
    per_group: usize,
    dim: usize,
    rows: &[Vec<f64>],
    w: f64,
    b: f64,
) -> f64 {
    let cos = |a: &[f64], bv: &[f64]| -> f64 {
        let mut dot = 0.0;
        let mut na = 0.0;
        let mut nb = 0.0;
        for d in 0..a.len() {
            dot += a[d] * bv[d];
            na += a[d] * a[d];
            nb += bv[d] * bv[d];
        }
        dot / ((na.sqrt() + EPS) * (nb.sqrt() + EPS))
    };

    let mut total = 0.0;
    for i in 0..groups {
        for j in 0..per_group {
            let e = &rows[i * per_group + j];
            // Similarities of this row against every group.
            let mut sims = Vec::with_capacity(groups);
            for k in 0..groups {
                let centroid: Vec<f64> = if k == i {
                    // Leave-one-out mean.
                    let mut c = vec![0.0; dim];
                    for m in 0..per_group {
                        if m == j {
                            continue;
                        }
                        for d in 0..dim {
                            c[d] += rows[i * per_group + m][d];
                        }
                    }
                    c.iter().map(|v| v / (per_group - 1) as f64).collect()
                } else {
                    let mut c = vec![0.0; dim];
                    for m in 0..per_group {
                        for d in 0..dim {
                            c[d] += rows[k * per_group + m][d];
                        }
                    }
                    c.iter().map(|v| v / per_group as f64).collect()
                };
                sims.push(w * cos(e, &centroid) + b);
            }
            // -log softmax at the own group.
            let mut denom = 0.0;
            for &s in &sims {
                denom += (s - sims[i]).exp();
            }
            total += denom.ln();
        }
    }
    total
}

fn random_unit_rows(n: usize, dim: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let mut row: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            row.iter_mut().for_each(|v| *v /= norm);
            row
        })
        .collect()
}

#[test]
fn ge2e_matches_brute_force_on_200_random_batches() {
    let started = std::time::Instant::now();
    let mut rng = Rng::new(0xE2E);
    for case in 0..200 {
        let groups = 2 + rng.below(2); // 2..=3
        let per_group = 2 + rng.below(2); // 2..=3
        let dim = 2 + rng.below(3); // 2..=4
        let rows = random_unit_rows(groups * per_group, dim, &mut rng);
        let w = rng.range(0.5, 12.0);
        let b = rng.range(-4.0, 4.0);

        let reference = brute_force_loss(groups, per_group, dim, &rows, w, b);

        let batch =
            EmbeddingBatch::new(groups, per_group, dim, rows.concat()).expect("valid batch");
        let plain = ge2e_loss(&batch, &Ge2eScale { w, b }).expect("plain loss");
        assert!(
            (plain - reference).abs() < 1e-10,
            "case {case}: plain {plain} vs brute force {reference}"
        );

        let mut g = Graph::<f64>::new();
        let emb = g
            .constant(
                Shape::matrix(groups * per_group, dim),
                batch.data().to_vec(),
            )
            .unwrap();
        let wn = g.leaf(&Tensor::scalar(w));
        let bn = g.leaf(&Tensor::scalar(b));
        let loss = ge2e_loss_graph(&mut g, emb, wn, bn, groups, per_group).expect("graph loss");
        let tape = g.value(loss)[0];
        assert!(
            (tape - reference).abs() < 1e-10,
            "case {case}: tape {tape} vs brute force {reference}"
        );
    }
    let elapsed = started.elapsed();
    assert!(
        elapsed.as_secs_f64() < 5.0,
        "oracle run took {elapsed:?}, budget is 5 s"
    );
}
