//! Stratified k-fold cross-validation plans.

use std::collections::HashSet;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::TrainError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub index: usize,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    pub folds: Vec<Fold>,
}

impl FoldPlan {
    /// `fold,subject_id,role` rows with roles `train`, `val` and `test`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("fold,subject_id,role\n");
        for f in &self.folds {
            for (role, ids) in [("train", &f.train), ("val", &f.val), ("test", &f.test)] {
                for id in ids {
                    writeln!(s, "{},{id},{role}", f.index).expect("writing to a String");
                }
            }
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self, TrainError> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("fold,subject_id,role") {
            return Err(TrainError::InvalidPlan("header must be fold,subject_id,role".into()));
        }
        let mut folds: Vec<Fold> = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').map(str::trim).collect();
            let [fold, id, role] = parts[..] else {
                return Err(TrainError::InvalidPlan(format!("line {}: expected 3 fields", i + 2)));
            };
            let fold: usize = fold
                .parse()
                .map_err(|_| TrainError::InvalidPlan(format!("line {}: bad fold index {fold:?}", i + 2)))?;
            while folds.len() <= fold {
                folds.push(Fold {
                    index: folds.len(),
                    train: Vec::new(),
                    val: Vec::new(),
                    test: Vec::new(),
                });
            }
            let f = &mut folds[fold];
            match role {
                "train" => f.train.push(id.to_string()),
                "val" => f.val.push(id.to_string()),
                "test" => f.test.push(id.to_string()),
                other => return Err(TrainError::InvalidPlan(format!("line {}: unknown role {other:?}", i + 2))),
            }
        }
        if folds.is_empty() {
            return Err(TrainError::InvalidPlan("no rows".into()));
        }
        Ok(Self { folds })
    }
}

/// Splits `quota` across groups proportionally to `sizes` by largest
/// remainder; ties go to the earlier group.
fn apportion(quota: usize, sizes: &[usize]) -> Vec<usize> {
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return vec![0; sizes.len()];
    }
    let exact: Vec<f64> = sizes.iter().map(|&s| quota as f64 * s as f64 / total as f64).collect();
    let mut out: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let mut left = quota - out.iter().sum::<usize>();
    for &g in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if out[g] < sizes[g] {
            out[g] += 1;
            left -= 1;
        }
    }
    out
}

/// Validation counts for two classes: the cohort share of class 0 rounded
/// down or up, whichever leaves the training list closer to that share.
fn binary_quotas(n_val: usize, pools: &[usize], share0: f64) -> Vec<usize> {
    let target = share0 * n_val as f64;
    let n_train = (pools[0] + pools[1] - n_val) as f64;
    let lo = n_val.saturating_sub(pools[1]);
    let hi = pools[0].min(n_val);
    let q0 = [target.floor() as usize, target.ceil() as usize]
        .into_iter()
        .map(|q| q.clamp(lo, hi))
        .min_by(|&a, &b| {
            let dev = |q: usize| ((pools[0] - q) as f64 - share0 * n_train).abs();
            dev(a).total_cmp(&dev(b)).then(a.cmp(&b))
        })
        .expect("two candidates");
    vec![q0, n_val - q0]
}

/// Stratified, shuffled assignment of `cohort` (`(subject_id, label)`) to
/// `folds` test folds. Within each fold the remaining subjects are split
/// into validation (`round(val_fraction · pool)`, stratified) and training.
pub fn make_folds(cohort: &[(String, u8)], folds: usize, val_fraction: f64, seed: u64) -> Result<FoldPlan, TrainError> {
    if folds < 2 {
        return Err(TrainError::InvalidConfig(format!("folds must be >= 2, got {folds}")));
    }
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(TrainError::InvalidConfig(format!(
            "val_fraction must be in (0, 1), got {val_fraction}"
        )));
    }
    let mut seen = HashSet::new();
    for (id, _) in cohort {
        if !seen.insert(id.as_str()) {
            return Err(TrainError::InvalidPlan(format!("duplicate subject {id:?}")));
        }
    }
    let mut labels: Vec<u8> = cohort.iter().map(|c| c.1).collect();
    labels.sort_unstable();
    labels.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut classes: Vec<Vec<&str>> = Vec::new();
    for &l in &labels {
        let mut ids: Vec<&str> = cohort.iter().filter(|c| c.1 == l).map(|c| c.0.as_str()).collect();
        if ids.len() < folds {
            return Err(TrainError::TooFewSubjects {
                label: l,
                count: ids.len(),
                folds,
            });
        }
        ids.shuffle(&mut rng);
        classes.push(ids);
    }

    // Deal class by class, continuing the round robin so fold sizes differ by at most one.
    let mut test: Vec<Vec<Vec<&str>>> = vec![vec![Vec::new(); classes.len()]; folds];
    let mut next = 0;
    for (c, ids) in classes.iter().enumerate() {
        for id in ids {
            test[next % folds][c].push(id);
            next += 1;
        }
    }

    let mut out = Vec::with_capacity(folds);
    for (k, test_k) in test.iter().enumerate() {
        let mut pools: Vec<Vec<&str>> = classes
            .iter()
            .zip(test_k)
            .map(|(ids, t)| ids.iter().copied().filter(|id| !t.contains(id)).collect())
            .collect();
        let pool_size: usize = pools.iter().map(Vec::len).sum();
        let n_val = (val_fraction * pool_size as f64).round() as usize;
        let sizes: Vec<usize> = pools.iter().map(Vec::len).collect();
        let quotas = if sizes.len() == 2 {
            binary_quotas(n_val, &sizes, classes[0].len() as f64 / cohort.len() as f64)
        } else {
            apportion(n_val, &sizes)
        };
        let (mut train, mut val) = (Vec::new(), Vec::new());
        for (pool, q) in pools.iter_mut().zip(quotas) {
            pool.shuffle(&mut rng);
            val.extend(pool[..q].iter().map(|s| s.to_string()));
            train.extend(pool[q..].iter().map(|s| s.to_string()));
        }
        out.push(Fold {
            index: k,
            train,
            val,
            test: test_k.iter().flatten().map(|s| s.to_string()).collect(),
        });
    }
    Ok(FoldPlan { folds: out })
}
