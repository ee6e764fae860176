//! Object dictionary: K-means over object representations and the
//! purity-maximising cluster-to-category correspondence.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2, Array3, ArrayView2, ArrayView3, Axis, NdFloat};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::archive::{Tensor, TensorArchive};
use crate::error::{invalid, shape_err, Error, Result};

/// Default cap on the number of candidate maps `categories^K` enumerated.
pub const DEFAULT_ENUMERATION_CAP: f64 = 2e7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryAssignment {
    /// `map[k]` is the category of cluster `k`.
    pub map: Vec<usize>,
    /// Sum over clusters of the fraction of members carrying the mapped label.
    pub purity: f64,
    pub num_categories: usize,
}

impl CategoryAssignment {
    /// Clusters mapped to `category`.
    pub fn clusters_of(&self, category: usize) -> impl Iterator<Item = usize> + '_ {
        self.map
            .iter()
            .enumerate()
            .filter(move |(_, &c)| c == category)
            .map(|(k, _)| k)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectDictionary {
    /// `K x C`, one key per row.
    pub keys: Array2<f64>,
    pub clip_ids: Vec<String>,
    /// Cluster index of each entry of `clip_ids`.
    pub assignments: Vec<usize>,
    pub inertia: f64,
    pub seed: u64,
    pub categories: Option<CategoryAssignment>,
}

impl ObjectDictionary {
    pub fn k(&self) -> usize {
        self.keys.nrows()
    }

    pub fn dim(&self) -> usize {
        self.keys.ncols()
    }

    pub fn keys_f32(&self) -> Array2<f32> {
        self.keys.mapv(|v| v as f32)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut ar = TensorArchive::new(json!({
            "kind": "dictionary",
            "k": self.k(),
            "c": self.dim(),
            "seed": self.seed,
            "inertia": self.inertia,
            "clip_ids": self.clip_ids,
            "categories": self.categories,
        }));
        ar.insert("keys", Tensor::F64(self.keys.clone().into_dyn()));
        ar.insert(
            "assignments",
            Tensor::I64(Array1::from_iter(self.assignments.iter().map(|&a| a as i64)).into_dyn()),
        );
        ar.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let ar = TensorArchive::load(path)?;
        if ar.meta.get("kind").and_then(|v| v.as_str()) != Some("dictionary") {
            return Err(Error::corrupt(path, "not a dictionary archive"));
        }
        let keys = ar
            .f64("keys")?
            .clone()
            .into_dimensionality()
            .map_err(|e| Error::corrupt(path, format!("keys: {e}")))?;
        let assignments: Vec<usize> = ar.i64("assignments")?.iter().map(|&a| a as usize).collect();
        let clip_ids: Vec<String> = serde_json::from_value(ar.meta["clip_ids"].clone())
            .map_err(|e| Error::corrupt(path, format!("clip_ids: {e}")))?;
        let categories: Option<CategoryAssignment> = serde_json::from_value(ar.meta["categories"].clone())
            .map_err(|e| Error::corrupt(path, format!("categories: {e}")))?;
        let dict = Self {
            keys,
            clip_ids,
            assignments,
            inertia: ar.meta["inertia"].as_f64().unwrap_or(f64::NAN),
            seed: ar.meta["seed"].as_u64().unwrap_or(0),
            categories,
        };
        if dict.assignments.len() != dict.clip_ids.len() {
            return Err(Error::corrupt(path, "assignment count differs from clip count"));
        }
        if ar.meta["k"].as_u64() != Some(dict.k() as u64) || ar.meta["c"].as_u64() != Some(dict.dim() as u64) {
            return Err(Error::corrupt(path, "header K/C disagree with key matrix"));
        }
        Ok(dict)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KMeansOptions {
    pub max_iter: usize,
    /// Stop once no key moves further than this (Euclidean).
    pub tol: f64,
    /// Independent k-means++ initialisations; the lowest inertia wins.
    pub restarts: usize,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        Self {
            max_iter: 300,
            tol: 1e-6,
            restarts: 4,
        }
    }
}

/// Objective value after every assignment step of the winning run.
#[derive(Debug, Clone, Default)]
pub struct FitTrace {
    pub objective: Vec<f64>,
    pub iterations: usize,
}

fn sq_dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: ndarray::ArrayView1<f64>, keys: ArrayView2<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, key) in keys.rows().into_iter().enumerate() {
        let d = sq_dist(point, key);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn kmeans_pp(points: ArrayView2<f64>, k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = points.nrows();
    let mut keys = Array2::zeros((k, points.ncols()));
    let first = rng.random_range(0..n);
    keys.row_mut(0).assign(&points.row(first));
    let mut d2: Vec<f64> = points.rows().into_iter().map(|p| sq_dist(p, keys.row(0))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if target < d {
                    idx = i;
                    break;
                }
                target -= d;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        keys.row_mut(c).assign(&points.row(pick));
        for (i, p) in points.rows().into_iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, keys.row(c)));
        }
    }
    keys
}

struct LloydRun {
    keys: Array2<f64>,
    labels: Vec<usize>,
    inertia: f64,
    trace: FitTrace,
}

fn lloyd(points: ArrayView2<f64>, mut keys: Array2<f64>, opts: &KMeansOptions) -> LloydRun {
    let n = points.nrows();
    let k = keys.nrows();
    let mut labels = vec![0usize; n];
    let mut dists = vec![0.0f64; n];
    let mut trace = FitTrace::default();

    for iter in 0..opts.max_iter.max(1) {
        for (i, p) in points.rows().into_iter().enumerate() {
            let (l, d) = nearest(p, keys.view());
            labels[i] = l;
            dists[i] = d;
        }
        trace.objective.push(dists.iter().sum());
        trace.iterations = iter + 1;

        let mut sums = Array2::<f64>::zeros(keys.raw_dim());
        let mut counts = vec![0usize; k];
        for (i, p) in points.rows().into_iter().enumerate() {
            sums.row_mut(labels[i]).scaled_add(1.0, &p);
            counts[labels[i]] += 1;
        }
        // Empty clusters take over the point currently worst served.
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let far = (0..n)
                .filter(|&i| counts[labels[i]] > 1)
                .max_by(|&a, &b| dists[a].total_cmp(&dists[b]));
            if let Some(i) = far {
                let old = labels[i];
                sums.row_mut(old).scaled_add(-1.0, &points.row(i));
                counts[old] -= 1;
                sums.row_mut(c).assign(&points.row(i));
                counts[c] = 1;
                labels[i] = c;
                dists[i] = 0.0;
            }
        }
        let mut shift = 0.0f64;
        for (c, &n) in counts.iter().enumerate() {
            if n == 0 {
                continue;
            }
            let mean = sums.row(c).mapv(|v| v / n as f64);
            shift = shift.max(sq_dist(mean.view(), keys.row(c)).sqrt());
            keys.row_mut(c).assign(&mean);
        }
        if shift < opts.tol {
            break;
        }
    }
    // Final assignment against the settled keys.
    let mut inertia = 0.0;
    for (i, p) in points.rows().into_iter().enumerate() {
        let (l, d) = nearest(p, keys.view());
        labels[i] = l;
        inertia += d;
    }
    LloydRun {
        keys,
        labels,
        inertia,
        trace,
    }
}

fn check_reps(reps: ArrayView2<f64>, clip_ids: &[String], k: usize) -> Result<()> {
    if k == 0 {
        return Err(invalid!("K must be positive"));
    }
    if reps.nrows() < k {
        return Err(invalid!("{} representations cannot fill K = {} clusters", reps.nrows(), k));
    }
    if clip_ids.len() != reps.nrows() {
        return Err(shape_err!("{} clip ids for {} representations", clip_ids.len(), reps.nrows()));
    }
    if reps.iter().any(|v| !v.is_finite()) {
        return Err(invalid!("object representations contain non-finite values"));
    }
    Ok(())
}

/// Lloyd's algorithm with k-means++ seeding (best of `opts.restarts`).
pub fn fit_dictionary(
    reps: ArrayView2<f64>,
    clip_ids: &[String],
    k: usize,
    seed: u64,
    opts: &KMeansOptions,
) -> Result<(ObjectDictionary, FitTrace)> {
    check_reps(reps, clip_ids, k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<LloydRun> = None;
    for _ in 0..opts.restarts.max(1) {
        let init = kmeans_pp(reps, k, &mut rng);
        let run = lloyd(reps, init, opts);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    let run = best.unwrap();
    Ok((
        ObjectDictionary {
            keys: run.keys,
            clip_ids: clip_ids.to_vec(),
            assignments: run.labels,
            inertia: run.inertia,
            seed,
            categories: None,
        },
        run.trace,
    ))
}

/// Lloyd's algorithm started from existing keys, so cluster indices stay
/// aligned with whatever was trained against them.
pub fn refine_dictionary(
    reps: ArrayView2<f64>,
    clip_ids: &[String],
    init: ArrayView2<f64>,
    seed: u64,
    opts: &KMeansOptions,
) -> Result<(ObjectDictionary, FitTrace)> {
    check_reps(reps, clip_ids, init.nrows())?;
    if init.ncols() != reps.ncols() {
        return Err(shape_err!("keys have {} dims, representations {}", init.ncols(), reps.ncols()));
    }
    let run = lloyd(reps, init.to_owned(), opts);
    Ok((
        ObjectDictionary {
            keys: run.keys,
            clip_ids: clip_ids.to_vec(),
            assignments: run.labels,
            inertia: run.inertia,
            seed,
            categories: None,
        },
        run.trace,
    ))
}

/// Dictionary whose clusters are given labels; keys are the label means.
pub fn dictionary_from_labels(
    reps: ArrayView2<f64>,
    clip_ids: &[String],
    labels: &[usize],
    k: usize,
    seed: u64,
) -> Result<ObjectDictionary> {
    check_reps(reps, clip_ids, k)?;
    if labels.len() != reps.nrows() {
        return Err(shape_err!("{} labels for {} representations", labels.len(), reps.nrows()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(invalid!("label {bad} outside [0, {k})"));
    }
    let mut keys = Array2::<f64>::zeros((k, reps.ncols()));
    let mut counts = vec![0usize; k];
    for (row, &l) in reps.rows().into_iter().zip(labels) {
        keys.row_mut(l).scaled_add(1.0, &row);
        counts[l] += 1;
    }
    for (mut key, &n) in keys.rows_mut().into_iter().zip(&counts) {
        if n > 0 {
            key.mapv_inplace(|v| v / n as f64);
        }
    }
    let inertia = reps
        .rows()
        .into_iter()
        .zip(labels)
        .map(|(r, &l)| sq_dist(r, keys.row(l)))
        .sum();
    Ok(ObjectDictionary {
        keys,
        clip_ids: clip_ids.to_vec(),
        assignments: labels.to_vec(),
        inertia,
        seed,
        categories: None,
    })
}

/// The K-means objective `sum_i min_k ||o_i - d_k||^2`.
pub fn clustering_objective(reps: ArrayView2<f64>, keys: ArrayView2<f64>) -> f64 {
    reps.rows().into_iter().map(|r| nearest(r, keys).1).sum()
}

/// Cluster-by-category member counts, `K x categories`.
pub fn contingency(assignments: &[usize], labels: &[usize], k: usize, categories: usize) -> Array2<usize> {
    let mut counts = Array2::zeros((k, categories));
    for (&a, &l) in assignments.iter().zip(labels) {
        counts[[a, l]] += 1;
    }
    counts
}

/// Purity of one cluster-to-category map under the summed-proportion
/// definition. Empty clusters contribute zero.
pub fn purity_of(counts: ArrayView2<usize>, map: &[usize]) -> f64 {
    counts
        .rows()
        .into_iter()
        .zip(map)
        .map(|(row, &c)| {
            let total: usize = row.sum();
            if total == 0 {
                0.0
            } else {
                row[c] as f64 / total as f64
            }
        })
        .sum()
}

/// Exhaustive search over every surjective map from clusters to categories.
/// Ties keep the lexicographically smallest map.
pub fn best_surjective_map(counts: ArrayView2<usize>, cap: f64) -> Result<CategoryAssignment> {
    let (k, n) = counts.dim();
    if n == 0 || k < n {
        return Err(invalid!("need K ({k}) >= number of categories ({n}) > 0"));
    }
    let candidates = (n as f64).powi(k as i32);
    if candidates > cap {
        return Err(Error::EnumerationTooLarge { candidates, cap });
    }
    let frac = Array2::from_shape_fn((k, n), |(c, j)| {
        let total: usize = counts.row(c).sum();
        if total == 0 {
            0.0
        } else {
            counts[[c, j]] as f64 / total as f64
        }
    });

    let mut map = vec![0usize; k];
    let mut used = vec![0usize; n];
    used[0] = k;
    let mut best: Option<(f64, Vec<usize>)> = None;
    loop {
        if used.iter().all(|&u| u > 0) {
            let p: f64 = map.iter().enumerate().map(|(c, &j)| frac[[c, j]]).sum();
            if best.as_ref().is_none_or(|(bp, _)| p > *bp + 1e-12) {
                best = Some((p, map.clone()));
            }
        }
        // Odometer increment, last position fastest -> lexicographic order.
        let mut pos = k;
        loop {
            if pos == 0 {
                let (purity, map) = best.expect("K >= categories admits a surjection");
                return Ok(CategoryAssignment {
                    map,
                    purity,
                    num_categories: n,
                });
            }
            pos -= 1;
            used[map[pos]] -= 1;
            if map[pos] + 1 < n {
                map[pos] += 1;
                used[map[pos]] += 1;
                break;
            }
            map[pos] = 0;
            used[0] += 1;
        }
    }
}

/// Finds the purity-maximising surjective cluster-to-category map for a
/// fitted dictionary. Every clip in the dictionary needs a label.
pub fn assign_categories(
    dict: &ObjectDictionary,
    labels: &BTreeMap<String, usize>,
    num_categories: usize,
    cap: f64,
) -> Result<CategoryAssignment> {
    let mut cats = Vec::with_capacity(dict.clip_ids.len());
    for id in &dict.clip_ids {
        let &c = labels
            .get(id)
            .ok_or_else(|| invalid!("clip `{id}` has no category label"))?;
        if c >= num_categories {
            return Err(invalid!("clip `{id}` label {c} outside [0, {num_categories})"));
        }
        cats.push(c);
    }
    let counts = contingency(&dict.assignments, &cats, dict.k(), num_categories);
    best_surjective_map(counts.view(), cap)
}

/// Per-category maps as the sum of the maps of every cluster assigned to it.
pub fn category_activation<F: NdFloat>(maps: ArrayView3<F>, assignment: &CategoryAssignment) -> Result<Array3<F>> {
    let (k, h, w) = maps.dim();
    if k != assignment.map.len() {
        return Err(shape_err!("{k} cluster maps, assignment covers {}", assignment.map.len()));
    }
    let mut out = Array3::zeros((assignment.num_categories, h, w));
    for (cluster, &cat) in assignment.map.iter().enumerate() {
        let mut dst = out.index_axis_mut(Axis(0), cat);
        dst += &maps.index_axis(Axis(0), cluster);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::nmi;
    use ndarray::{array, Array};
    use proptest::prelude::{prop_assert, prop_assert_eq, prop_assume, proptest};
    use rand_distr::{Distribution, Normal};

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn repeated_points_are_recovered_exactly() {
        let distinct = array![[0.0, 0.0], [5.0, 1.0], [-3.0, 4.0], [2.0, -6.0]];
        let reps = Array2::from_shape_fn((40, 2), |(i, j)| distinct[[i % 4, j]]);
        let (d, _) = fit_dictionary(reps.view(), &ids(40), 4, 1, &KMeansOptions::default()).unwrap();
        assert_eq!(d.inertia, 0.0);
        for row in distinct.rows() {
            assert!(d.keys.rows().into_iter().any(|k| k == row));
        }
    }

    #[test]
    fn single_cluster_is_the_mean() {
        let reps = array![[1.0, 2.0], [3.0, 6.0], [5.0, 1.0]];
        let (d, _) = fit_dictionary(reps.view(), &ids(3), 1, 0, &KMeansOptions::default()).unwrap();
        assert!((d.keys[[0, 0]] - 3.0).abs() < 1e-12);
        assert!((d.keys[[0, 1]] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn too_few_points_rejected() {
        let reps = array![[1.0, 2.0], [3.0, 6.0]];
        assert!(matches!(
            fit_dictionary(reps.view(), &ids(2), 3, 0, &KMeansOptions::default()),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn planted_blobs_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let noise = Normal::new(0.0, 0.01).unwrap();
        let mut reps = Array2::zeros((12 * 25, 2));
        let mut truth = Vec::new();
        for b in 0..12 {
            let (cx, cy) = ((b % 4) as f64, (b / 4) as f64);
            for i in 0..25 {
                reps[[b * 25 + i, 0]] = cx + noise.sample(&mut rng);
                reps[[b * 25 + i, 1]] = cy + noise.sample(&mut rng);
                truth.push(b);
            }
        }
        let (d, trace) = fit_dictionary(reps.view(), &ids(300), 12, 3, &KMeansOptions::default()).unwrap();
        assert!((nmi(&d.assignments, &truth).unwrap() - 1.0).abs() < 1e-12);
        for w in trace.objective.windows(2) {
            assert!(w[1] <= w[0] + 1e-9 * w[0].abs().max(1.0));
        }
    }

    #[test]
    fn converged_keys_are_member_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let reps = Array2::from_shape_fn((60, 3), |_| rng.random_range(-1.0..1.0));
        let (d, _) = fit_dictionary(reps.view(), &ids(60), 5, 9, &KMeansOptions::default()).unwrap();
        for k in 0..5 {
            let members: Vec<usize> = (0..60).filter(|&i| d.assignments[i] == k).collect();
            assert!(!members.is_empty());
            for j in 0..3 {
                let mean = members.iter().map(|&i| reps[[i, j]]).sum::<f64>() / members.len() as f64;
                assert!((d.keys[[k, j]] - mean).abs() < 1e-6);
            }
        }
        for (i, r) in reps.rows().into_iter().enumerate() {
            assert_eq!(nearest(r, d.keys.view()).0, d.assignments[i]);
        }
    }

    #[test]
    fn refine_keeps_indices_of_good_keys() {
        let reps = array![[0.0, 0.0], [0.1, 0.0], [10.0, 10.0], [10.1, 10.0]];
        let init = array![[10.0, 10.0], [0.0, 0.0]];
        let (d, _) = refine_dictionary(reps.view(), &ids(4), init.view(), 0, &KMeansOptions::default()).unwrap();
        assert_eq!(d.assignments, vec![1, 1, 0, 0]);
    }

    #[test]
    fn pure_clusters_give_full_purity() {
        let counts = array![[0usize, 7, 0], [0, 0, 4], [9, 0, 0]];
        let a = best_surjective_map(counts.view(), DEFAULT_ENUMERATION_CAP).unwrap();
        assert_eq!(a.map, vec![1, 2, 0]);
        assert!((a.purity - 3.0).abs() < 1e-12);
    }

    #[test]
    fn two_by_two_hand_case() {
        let counts = array![[3usize, 1], [0, 4]];
        let a = best_surjective_map(counts.view(), DEFAULT_ENUMERATION_CAP).unwrap();
        assert_eq!(a.map, vec![0, 1]);
        assert!((a.purity - 1.75).abs() < 1e-12);
    }

    #[test]
    fn ties_pick_lexicographically_smallest() {
        let counts = array![[1usize, 1], [1, 1]];
        let a = best_surjective_map(counts.view(), DEFAULT_ENUMERATION_CAP).unwrap();
        assert_eq!(a.map, vec![0, 1]);
    }

    #[test]
    fn enumeration_cap_enforced() {
        let counts = Array2::<usize>::ones((30, 4));
        assert!(matches!(
            best_surjective_map(counts.view(), DEFAULT_ENUMERATION_CAP),
            Err(Error::EnumerationTooLarge { .. })
        ));
    }

    #[test]
    fn more_categories_than_clusters_rejected() {
        let counts = Array2::<usize>::ones((2, 3));
        assert!(best_surjective_map(counts.view(), DEFAULT_ENUMERATION_CAP).is_err());
    }

    #[test]
    fn assign_categories_requires_every_label() {
        let reps = array![[0.0], [1.0], [10.0], [11.0]];
        let (d, _) = fit_dictionary(reps.view(), &ids(4), 2, 0, &KMeansOptions::default()).unwrap();
        let mut labels: BTreeMap<String, usize> = ids(4).into_iter().zip([0, 0, 1, 1]).collect();
        let a = assign_categories(&d, &labels, 2, DEFAULT_ENUMERATION_CAP).unwrap();
        assert!((a.purity - 2.0).abs() < 1e-12);
        assert_eq!(a.map[d.assignments[0]], 0);
        labels.remove("c3");
        assert!(assign_categories(&d, &labels, 2, DEFAULT_ENUMERATION_CAP).is_err());
    }

    #[test]
    fn activation_sums_clusters_per_category() {
        let maps = Array::from_shape_fn((3, 2, 2), |(k, i, j)| (k * 4 + i * 2 + j) as f64 * 0.5 - 1.0);
        let a = CategoryAssignment {
            map: vec![1, 0, 1],
            purity: 0.0,
            num_categories: 2,
        };
        let out = category_activation(maps.view(), &a).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(out[[0, i, j]], maps[[1, i, j]]);
                assert_eq!(out[[1, i, j]], maps[[0, i, j]] + maps[[2, i, j]]);
            }
        }
        let identity = CategoryAssignment {
            map: vec![0, 1, 2],
            purity: 0.0,
            num_categories: 3,
        };
        assert_eq!(category_activation(maps.view(), &identity).unwrap(), maps);
    }

    #[test]
    fn archive_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.dict");
        let reps = array![[0.0, 1.0], [1.0, 1.0], [10.0, 3.0]];
        let (mut d, _) = fit_dictionary(reps.view(), &ids(3), 2, 5, &KMeansOptions::default()).unwrap();
        d.categories = Some(CategoryAssignment {
            map: vec![1, 0],
            purity: 2.0,
            num_categories: 2,
        });
        d.save(&p).unwrap();
        assert_eq!(ObjectDictionary::load(&p).unwrap(), d);
    }

    fn random_map(k: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        loop {
            let m: Vec<usize> = (0..k).map(|_| rng.random_range(0..n)).collect();
            if (0..n).all(|c| m.contains(&c)) {
                return m;
            }
        }
    }

    proptest! {
        #[test]
        fn best_map_dominates_random_surjections(seed in 0u64..1000, k in 2usize..6, n in 1usize..4) {
            prop_assume!(k >= n);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let counts = Array2::from_shape_fn((k, n), |_| rng.random_range(0usize..6));
            let best = best_surjective_map(counts.view(), DEFAULT_ENUMERATION_CAP).unwrap();
            prop_assert!((purity_of(counts.view(), &best.map) - best.purity).abs() < 1e-12);
            for _ in 0..100 {
                let m = random_map(k, n, &mut rng);
                prop_assert!(purity_of(counts.view(), &m) <= best.purity + 1e-12);
            }
        }

        #[test]
        fn permuting_clusters_permutes_the_map(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // Distinct-valued rows make the optimum unique.
            let counts = Array2::from_shape_fn((4, 3), |(i, j)| if rng.random_bool(0.5) { 10 * (i + 1) + j } else { j * 3 + i });
            let a = best_surjective_map(counts.view(), DEFAULT_ENUMERATION_CAP).unwrap();
            let perm = [2usize, 0, 3, 1];
            let permuted = Array2::from_shape_fn((4, 3), |(i, j)| counts[[perm[i], j]]);
            let b = best_surjective_map(permuted.view(), DEFAULT_ENUMERATION_CAP).unwrap();
            prop_assume!((a.purity - b.purity).abs() < 1e-12);
            // Only check when the optimum is unique.
            let ties = {
                let mut count = 0;
                let mut m = vec![0usize; 4];
                loop {
                    if (0..3).all(|c| m.contains(&c)) && (purity_of(counts.view(), &m) - a.purity).abs() < 1e-12 {
                        count += 1;
                    }
                    let mut p = 4;
                    let mut done = true;
                    while p > 0 {
                        p -= 1;
                        if m[p] + 1 < 3 { m[p] += 1; done = false; break; }
                        m[p] = 0;
                    }
                    if done { break; }
                }
                count
            };
            prop_assume!(ties == 1);
            for (i, &p) in perm.iter().enumerate() {
                prop_assert_eq!(b.map[i], a.map[p]);
            }
        }
    }
}
