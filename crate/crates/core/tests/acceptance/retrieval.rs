use adreason_core::retrieval::{build_codebook, build_index, AlignmentIndex, FeatureGrid, RetrievalParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{ensure, Outcome};

const ROW_TOL: f64 = 1e-9;
const DEGREE_TOL: f64 = 1e-9;
const CENTER_TOL: f64 = 1e-6;
const EPS: f64 = 1e-8;

fn random_grid(rng: &mut ChaCha8Rng, id: &str, h: usize, w: usize, c: usize) -> FeatureGrid {
    let data = (0..h * w * c).map(|_| rng.random::<f32>()).collect();
    FeatureGrid::new(id, h, w, c, data).unwrap()
}

fn check_rows(index: &AlignmentIndex) -> Result<usize, String> {
    let mut rows = 0;
    for e in index.entries() {
        for r in e.rows() {
            let s: f64 = r.iter().sum();
            ensure!((s - 1.0).abs() <= ROW_TOL, "row of {} sums to {s}", e.image_id());
            rows += 1;
        }
    }
    Ok(rows)
}

fn self_retrieval(rows: &mut usize) -> Result<(), String> {
    for trial in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(trial);
        let n = rng.random_range(3..=8);
        let grids: Vec<FeatureGrid> = (0..n)
            .map(|i| {
                let (h, w) = (rng.random_range(5..=12), rng.random_range(5..=12));
                random_grid(&mut rng, &format!("img{i:02}"), h, w, 3)
            })
            .collect();
        let params = RetrievalParams { n_centers: 6, seed: trial, ..RetrievalParams::default() };
        let index = build_index(&grids, params).map_err(|e| e.to_string())?;
        *rows += check_rows(&index)?;
        let q = &grids[rng.random_range(0..n)];
        let top = index.retrieve_topk(q, n).map_err(|e| e.to_string())?;
        ensure!(
            top[0].image_id == q.image_id() && top[0].degree == 0.0,
            "trial {trial}: first hit {:?} at degree {} for query {}",
            top[0].image_id,
            top[0].degree,
            q.image_id()
        );
    }
    Ok(())
}

fn oracle_hist(g: &FeatureGrid, centers: &[Vec<f64>], s: usize) -> Vec<Vec<f64>> {
    // Grids here are multiples of s, so blocks tile them exactly.
    let (bh, bw) = (g.height() / s, g.width() / s);
    let mut h = vec![vec![0.0; centers.len()]; s * s];
    for y in 0..g.height() {
        for x in 0..g.width() {
            let p = g.patch(y, x);
            let mut best = (f64::INFINITY, 0);
            for (k, c) in centers.iter().enumerate() {
                let d: f64 = c.iter().zip(p).map(|(a, &b)| (a - f64::from(b)).powi(2)).sum();
                if d < best.0 {
                    best = (d, k);
                }
            }
            h[(y / bh) * s + x / bw][best.1] += 1.0;
        }
    }
    let per_block = (bh * bw) as f64;
    h.into_iter().map(|r| r.into_iter().map(|v| v / per_block).collect()).collect()
}

fn oracle_kl(p: &[f64], q: &[f64]) -> f64 {
    let zp: f64 = p.iter().map(|v| v + EPS).sum();
    let zq: f64 = q.iter().map(|v| v + EPS).sum();
    p.iter().zip(q).map(|(a, b)| ((a + EPS) / zp) * (((a + EPS) / zp) / ((b + EPS) / zq)).ln()).sum::<f64>().max(0.0)
}

fn oracle_degree(reference: &[Vec<f64>], query: &[Vec<f64>], tau: usize) -> f64 {
    let mut d: Vec<f64> = reference.iter().zip(query).map(|(r, q)| oracle_kl(r, q)).collect();
    d.sort_by(f64::total_cmp);
    let keep = d.len() - tau;
    d[..keep].iter().sum::<f64>() / keep as f64
}

fn brute_force(rows: &mut usize) -> Result<usize, String> {
    let mut checked = 0;
    for trial in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
        let n = rng.random_range(5..=20);
        let grids: Vec<FeatureGrid> = (0..n)
            .map(|i| {
                let (h, w) = (5 * rng.random_range(1..=3), 5 * rng.random_range(1..=3));
                random_grid(&mut rng, &format!("n{i:02}"), h, w, 4)
            })
            .collect();
        let params = RetrievalParams { n_centers: 8, seed: trial, ..RetrievalParams::default() };
        let index = build_index(&grids, params).map_err(|e| e.to_string())?;
        *rows += check_rows(&index)?;
        let query = random_grid(&mut rng, "query", 10, 10, 4);
        let k = params.top_k.min(n);
        let got = index.retrieve_topk(&query, k).map_err(|e| e.to_string())?;

        let centers = index.codebook().centers();
        let qh = oracle_hist(&query, centers, params.grid);
        let mut want: Vec<(f64, String)> = grids
            .iter()
            .map(|g| (oracle_degree(&oracle_hist(g, centers, params.grid), &qh, params.trim), g.image_id().into()))
            .collect();
        want.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        ensure!(got.len() == k, "trial {trial}: {} results for K={k}", got.len());
        for (g, (d, id)) in got.iter().zip(&want) {
            ensure!(
                g.image_id == *id && (g.degree - d).abs() <= DEGREE_TOL,
                "trial {trial}: got ({}, {}) expected ({id}, {d})",
                g.image_id,
                g.degree
            );
        }
        checked += 1;
    }
    Ok(checked)
}

fn oracle_lloyd(points: &[[f64; 2]], mut centers: Vec<[f64; 2]>) -> Vec<[f64; 2]> {
    loop {
        let mut sums = vec![[0.0; 2]; centers.len()];
        let mut counts = vec![0usize; centers.len()];
        for p in points {
            let k = (0..centers.len())
                .min_by(|&a, &b| {
                    let da = (p[0] - centers[a][0]).powi(2) + (p[1] - centers[a][1]).powi(2);
                    let db = (p[0] - centers[b][0]).powi(2) + (p[1] - centers[b][1]).powi(2);
                    da.total_cmp(&db)
                })
                .unwrap();
            sums[k][0] += p[0];
            sums[k][1] += p[1];
            counts[k] += 1;
        }
        let next: Vec<[f64; 2]> =
            sums.iter().zip(&counts).map(|(s, &c)| [s[0] / c as f64, s[1] / c as f64]).collect();
        if next == centers {
            return next;
        }
        centers = next;
    }
}

fn lloyd() -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let anchors = [[0.0f32, 0.0], [100.0, 0.0], [0.0, 100.0]];
    let mut data = Vec::new();
    for a in anchors {
        for _ in 0..30 {
            data.push(a[0] + rng.random_range(-1.0..1.0));
            data.push(a[1] + rng.random_range(-1.0..1.0));
        }
    }
    let points: Vec<[f64; 2]> = data.chunks(2).map(|c| [f64::from(c[0]), f64::from(c[1])]).collect();
    let grid = FeatureGrid::new("clusters", 9, 10, 2, data).unwrap();
    let init = vec![points[0], points[30], points[60]];
    let mut want = oracle_lloyd(&points, init);
    want.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));

    let mut worst = 0.0f64;
    for seed in 0..5 {
        let cb = build_codebook(std::slice::from_ref(&grid), 3, seed).map_err(|e| e.to_string())?;
        let mut got: Vec<[f64; 2]> = cb.centers().iter().map(|c| [c[0], c[1]]).collect();
        got.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
        for (g, w) in got.iter().zip(&want) {
            worst = worst.max((g[0] - w[0]).abs()).max((g[1] - w[1]).abs());
        }
    }
    ensure!(worst <= CENTER_TOL, "codebook deviates from Lloyd oracle by {worst:e}");
    Ok(worst)
}

pub fn run() -> Outcome {
    let mut rows = 0;
    self_retrieval(&mut rows)?;
    let checked = brute_force(&mut rows)?;
    let worst = lloyd()?;
    Ok(format!(
        "self-retrieval 100/100 at degree 0; top-K equals brute force on {checked} indexes (tol {DEGREE_TOL:e}); \
         codebook vs Lloyd {worst:.1e} (tol {CENTER_TOL:e}); {rows} rows sum to 1 (tol {ROW_TOL:e})"
    ))
}
