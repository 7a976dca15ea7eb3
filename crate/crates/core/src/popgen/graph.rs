use std::collections::BTreeMap;
use std::sync::Arc;

use log::warn;
use serde::{Deserialize, Serialize};

use super::{Attribute, Population};
use crate::rng::{Channel, RngStream};
use crate::sparse::Csr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layer {
    Household,
    Workplace,
    Mobility,
}

impl Layer {
    pub const ALL: [Layer; 3] = [Layer::Household, Layer::Workplace, Layer::Mobility];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphConfig {
    pub household_weight: f64,
    /// Expected degree within each occupation group.
    pub workplace_mean_degree: f64,
    pub workplace_weight: f64,
    /// Expected degree of the mobility layer.
    pub mobility_mean_degree: f64,
    pub mobility_weight: f64,
    /// Draw mobility contacts within boroughs only.
    pub mobility_stratified: bool,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            household_weight: 1.0,
            workplace_mean_degree: 4.0,
            workplace_weight: 1.0,
            mobility_mean_degree: 8.0,
            mobility_weight: 1.0,
            mobility_stratified: true,
        }
    }
}

/// Layered symmetric contact network.
#[derive(Debug, Clone)]
pub struct ContactGraph {
    pub household: Csr,
    pub workplace: Csr,
    pub mobility: Csr,
    /// Union of the layers with per-layer weights applied, summed where
    /// layers overlap. Shared with the differentiation tape.
    pub combined: Arc<Csr>,
    pub warnings: Vec<String>,
}

impl ContactGraph {
    pub fn layer(&self, layer: Layer) -> &Csr {
        match layer {
            Layer::Household => &self.household,
            Layer::Workplace => &self.workplace,
            Layer::Mobility => &self.mobility,
        }
    }

    pub fn degree(&self, layer: Layer, agent: usize) -> usize {
        self.layer(layer).row_len(agent)
    }

    pub fn mean_degree(&self, layer: Layer) -> f64 {
        let m = self.layer(layer);
        m.nnz() as f64 / m.n_rows().max(1) as f64
    }

    pub fn n_agents(&self) -> usize {
        self.combined.n_rows()
    }

    /// Relabels agents: new agent `k` is old agent `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> ContactGraph {
        let mut inv = vec![0u32; perm.len()];
        for (k, &old) in perm.iter().enumerate() {
            inv[old] = k as u32;
        }
        let relabel = |m: &Csr| {
            let t: Vec<(u32, u32, f64)> = m
                .entries()
                .map(|(r, c, w)| (inv[r], inv[c as usize], w))
                .collect();
            Csr::from_triplets(m.n_rows(), m.n_cols(), &t)
        };
        ContactGraph {
            household: relabel(&self.household),
            workplace: relabel(&self.workplace),
            mobility: relabel(&self.mobility),
            combined: Arc::new(relabel(&self.combined)),
            warnings: self.warnings.clone(),
        }
    }
}

/// Builds household cliques, occupation-stratified workplace contacts, and
/// (optionally borough-stratified) mobility contacts. Random layers are
/// Erdős–Rényi graphs sampled with geometric skipping, so each possible edge
/// is an independent Bernoulli trial.
pub fn build_contact_graph(pop: &Population, cfg: &GraphConfig, seed: u64) -> ContactGraph {
    let n = pop.len();
    let mut warnings = Vec::new();

    let mut hh = Vec::new();
    for r in pop.households() {
        for i in r.clone() {
            for j in (i + 1)..r.end {
                hh.push((i as u32, j as u32, cfg.household_weight));
                hh.push((j as u32, i as u32, cfg.household_weight));
            }
        }
    }
    let household = Csr::from_triplets(n, n, &hh);
    drop(hh);

    let groups = |attr: Attribute| {
        let mut g: BTreeMap<u16, Vec<u32>> = BTreeMap::new();
        for (i, &c) in pop.codes(attr).iter().enumerate() {
            g.entry(c).or_default().push(i as u32);
        }
        g.into_values().collect::<Vec<_>>()
    };

    let workplace = if cfg.workplace_mean_degree > 0.0 {
        stratified_er(
            n,
            &groups(Attribute::Occupation),
            cfg.workplace_mean_degree,
            cfg.workplace_weight,
            seed,
            1,
            "workplace",
            &mut warnings,
        )
    } else {
        Csr::empty(n)
    };
    let mobility = if cfg.mobility_mean_degree > 0.0 {
        let strata = if cfg.mobility_stratified {
            groups(Attribute::Borough)
        } else {
            vec![(0..n as u32).collect()]
        };
        stratified_er(
            n,
            &strata,
            cfg.mobility_mean_degree,
            cfg.mobility_weight,
            seed,
            2,
            "mobility",
            &mut warnings,
        )
    } else {
        Csr::empty(n)
    };

    let combined = Arc::new(merge(n, &[&household, &workplace, &mobility]));
    ContactGraph {
        household,
        workplace,
        mobility,
        combined,
        warnings,
    }
}

#[allow(clippy::too_many_arguments)]
fn stratified_er(
    n: usize,
    strata: &[Vec<u32>],
    mean_degree: f64,
    weight: f64,
    seed: u64,
    layer_tag: u64,
    name: &str,
    warnings: &mut Vec<String>,
) -> Csr {
    let mut t = Vec::new();
    for (s, members) in strata.iter().enumerate() {
        let m = members.len();
        if m < 2 {
            continue;
        }
        let mut p = mean_degree / (m - 1) as f64;
        if p > 1.0 {
            let msg = format!(
                "{name} layer: mean degree {mean_degree} infeasible for group of {m}; clamped to {}",
                m - 1
            );
            warn!("{msg}");
            warnings.push(msg);
            p = 1.0;
        }
        let mut rng = RngStream::new(seed, layer_tag, s as u64, Channel::Graph);
        // Batagelj & Brandes skipping over the lower triangle.
        let (mut v, mut w): (usize, i64) = (1, -1);
        while v < m {
            let skip = rng.geometric(p);
            w = w
                .saturating_add(1)
                .saturating_add(skip.min(i64::MAX as u64 / 2) as i64);
            while w >= v as i64 && v < m {
                w -= v as i64;
                v += 1;
            }
            if v < m {
                let (a, b) = (members[v], members[w as usize]);
                t.push((a, b, weight));
                t.push((b, a, weight));
            }
        }
    }
    Csr::from_triplets(n, n, &t)
}

fn merge(n: usize, layers: &[&Csr]) -> Csr {
    let mut t = Vec::with_capacity(layers.iter().map(|l| l.nnz()).sum());
    for l in layers {
        t.extend(l.entries().map(|(r, c, w)| (r as u32, c, w)));
    }
    Csr::from_triplets(n, n, &t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::popgen::{sample_population, HouseholdSizeDist, JointTable};

    fn pop(n: usize, hh: usize, boroughs: usize) -> Population {
        let bins: Vec<String> = (0..boroughs).map(|b| format!("b{b}")).collect();
        let j = JointTable::new(vec!["borough".into()], vec![bins], vec![1.0; boroughs]).unwrap();
        sample_population(&j, n, &HouseholdSizeDist::point(hh), 3).unwrap()
    }

    fn zero_cfg() -> GraphConfig {
        GraphConfig {
            workplace_mean_degree: 0.0,
            mobility_mean_degree: 0.0,
            ..Default::default()
        }
    }

    #[test]
    fn single_household_clique() {
        let p = pop(4, 4, 1);
        let g = build_contact_graph(&p, &zero_cfg(), 1);
        assert_eq!(g.household.nnz() / 2, 6);
        assert_eq!(g.workplace.nnz() + g.mobility.nnz(), 0);
    }

    #[test]
    fn singleton_households_empty_graph() {
        let p = pop(50, 1, 2);
        let g = build_contact_graph(&p, &zero_cfg(), 1);
        assert_eq!(g.combined.nnz(), 0);
    }

    #[test]
    fn mobility_mean_degree_concentrates() {
        let p = pop(10_000, 1, 5);
        let cfg = GraphConfig {
            workplace_mean_degree: 0.0,
            mobility_mean_degree: 8.0,
            ..Default::default()
        };
        let g = build_contact_graph(&p, &cfg, 9);
        let d = g.mean_degree(Layer::Mobility);
        assert!((d - 8.0).abs() <= 0.3, "{d}");
        assert!(g.mobility.is_symmetric());
        assert!(!g.mobility.has_self_loops());
    }

    #[test]
    fn complete_graph_when_degree_is_n_minus_one() {
        let p = pop(30, 1, 1);
        let cfg = GraphConfig {
            workplace_mean_degree: 0.0,
            mobility_mean_degree: 29.0,
            mobility_stratified: false,
            ..Default::default()
        };
        let g = build_contact_graph(&p, &cfg, 0);
        assert_eq!(g.mobility.nnz(), 30 * 29);
    }

    #[test]
    fn infeasible_degree_is_clamped_with_warning() {
        let p = pop(10, 1, 1);
        let cfg = GraphConfig {
            workplace_mean_degree: 0.0,
            mobility_mean_degree: 50.0,
            ..Default::default()
        };
        let g = build_contact_graph(&p, &cfg, 0);
        assert_eq!(g.mobility.nnz(), 90);
        assert_eq!(g.warnings.len(), 1);
    }

    #[test]
    fn household_degree_is_size_minus_one() {
        let p = pop(2_000, 3, 4);
        let g = build_contact_graph(&p, &GraphConfig::default(), 5);
        for r in p.households() {
            for i in r.clone() {
                assert_eq!(g.degree(Layer::Household, i), r.len() - 1);
            }
        }
        assert!(g.combined.is_symmetric());
    }
}
