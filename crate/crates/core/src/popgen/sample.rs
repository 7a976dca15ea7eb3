use serde::{Deserialize, Serialize};

use super::{Attribute, AttributeLabels, JointTable, PopgenError, Population};
use crate::rng::{Channel, RngStream};

/// Discrete distribution of household sizes as `(size, weight)` pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HouseholdSizeDist(pub Vec<(usize, f64)>);

impl HouseholdSizeDist {
    pub fn point(size: usize) -> Self {
        Self(vec![(size, 1.0)])
    }

    pub fn validate(&self) -> Result<(), PopgenError> {
        if self.0.is_empty() {
            return Err(PopgenError::HouseholdDist("empty".into()));
        }
        if self
            .0
            .iter()
            .any(|&(s, w)| s == 0 || !(w.is_finite() && w >= 0.0))
        {
            return Err(PopgenError::HouseholdDist(
                "sizes must be >= 1 with nonnegative weights".into(),
            ));
        }
        if self.0.iter().map(|p| p.1).sum::<f64>() <= 0.0 {
            return Err(PopgenError::HouseholdDist("no positive weight".into()));
        }
        Ok(())
    }

    fn draw(&self, u: f64) -> usize {
        let total: f64 = self.0.iter().map(|p| p.1).sum();
        let mut acc = 0.0;
        for &(s, w) in &self.0 {
            acc += w / total;
            if u < acc {
                return s;
            }
        }
        self.0
            .iter()
            .rev()
            .find(|p| p.1 > 0.0)
            .map(|p| p.0)
            .unwrap_or(1)
    }
}

/// Draws `n` agents whose attribute combination follows `joint`, then groups
/// them into households within each borough.
///
/// Attributes absent from `joint` get the single label `"all"`. Agents are
/// ordered by borough and then by household; `agent_id` equals the final row.
pub fn sample_population(
    joint: &JointTable,
    n: usize,
    households: &HouseholdSizeDist,
    seed: u64,
) -> Result<Population, PopgenError> {
    if n == 0 {
        return Err(PopgenError::EmptyPopulation);
    }
    households.validate()?;
    let total = joint.total();
    if !(total > 0.0) {
        return Err(PopgenError::EmptyJoint);
    }

    let mut labels = AttributeLabels::default();
    let mut axis_of = [None; 5];
    for attr in Attribute::ALL {
        match joint.axis_index(attr.name()) {
            Some(a) => {
                *labels.get_mut(attr) = joint.bins[a].clone();
                axis_of[attr as usize] = Some(a);
            }
            None => *labels.get_mut(attr) = vec!["all".to_string()],
        }
    }
    if let Some(extra) = joint.axes.iter().find(|a| a.parse::<Attribute>().is_err()) {
        return Err(PopgenError::BadJoint(format!("unknown axis {extra}")));
    }

    let mut cdf = Vec::with_capacity(joint.cells.len());
    let mut acc = 0.0;
    for &c in &joint.cells {
        acc += c / total;
        cdf.push(acc);
    }
    let last_positive = joint.cells.iter().rposition(|&c| c > 0.0).unwrap_or(0);

    let mut attrs: [Vec<u16>; 5] = std::array::from_fn(|_| Vec::with_capacity(n));
    for i in 0..n {
        let u = RngStream::new(seed, 0, i as u64, Channel::Synthesis).uniform();
        let cell = cdf.partition_point(|&c| c <= u).min(last_positive);
        let idx = joint.unravel(cell);
        for attr in Attribute::ALL {
            attrs[attr as usize].push(axis_of[attr as usize].map_or(0, |a| idx[a] as u16));
        }
    }

    // Stable sort by borough, then fill households sequentially.
    let borough = &attrs[Attribute::Borough as usize];
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| borough[i]);
    let mut household_id = Vec::with_capacity(n);
    let mut hh = 0u32;
    let mut remaining = 0usize;
    let mut current_borough = None;
    for &i in &order {
        if remaining == 0 || current_borough != Some(borough[i]) {
            if !household_id.is_empty() {
                hh += 1;
            }
            let u = RngStream::new(seed, 1, hh as u64, Channel::Synthesis).uniform();
            remaining = households.draw(u);
            current_borough = Some(borough[i]);
        }
        household_id.push(hh);
        remaining -= 1;
    }

    let attrs: [Vec<u16>; 5] =
        std::array::from_fn(|a| order.iter().map(|&i| attrs[a][i]).collect());
    Ok(Population::from_static(
        (0..n as u64).collect(),
        labels,
        attrs,
        household_id,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn joint(axes: &[(&str, &[&str])], cells: Vec<f64>) -> JointTable {
        JointTable::new(
            axes.iter().map(|a| a.0.to_string()).collect(),
            axes.iter()
                .map(|a| a.1.iter().map(|s| s.to_string()).collect())
                .collect(),
            cells,
        )
        .unwrap()
    }

    #[test]
    fn point_mass_joint_gives_identical_agents() {
        let j = joint(
            &[("age_band", &["a", "b"]), ("gender", &["F", "M"])],
            vec![0.0, 0.0, 5.0, 0.0],
        );
        let pop = sample_population(&j, 500, &HouseholdSizeDist::point(2), 1).unwrap();
        assert!(pop.codes(Attribute::AgeBand).iter().all(|&c| c == 1));
        assert!(pop.codes(Attribute::Gender).iter().all(|&c| c == 0));
        assert_eq!(pop.label(Attribute::Borough, 0), "all");
    }

    #[test]
    fn household_point_mass_three() {
        let j = joint(&[("gender", &["F", "M"])], vec![1.0, 1.0]);
        let pop = sample_population(&j, 9, &HouseholdSizeDist::point(3), 4).unwrap();
        let hh = pop.households();
        assert_eq!(hh.len(), 3);
        assert!(hh.iter().all(|r| r.len() == 3));
    }

    #[test]
    fn households_do_not_cross_boroughs() {
        let j = joint(&[("borough", &["x", "y", "z"])], vec![1.0, 2.0, 3.0]);
        let pop =
            sample_population(&j, 1000, &HouseholdSizeDist(vec![(1, 1.0), (4, 2.0)]), 2).unwrap();
        for r in pop.households() {
            let b = pop.codes(Attribute::Borough)[r.start];
            assert!(r.clone().all(|i| pop.codes(Attribute::Borough)[i] == b));
        }
    }

    #[test]
    fn uniform_two_cells_frequency() {
        let j = joint(&[("gender", &["F", "M"])], vec![1.0, 1.0]);
        let n = 100_000;
        let pop = sample_population(&j, n, &HouseholdSizeDist::point(1), 11).unwrap();
        let f = pop
            .codes(Attribute::Gender)
            .iter()
            .filter(|&&c| c == 0)
            .count() as f64
            / n as f64;
        assert!((f - 0.5).abs() <= 0.0047, "{f}");
    }

    #[test]
    fn empty_inputs_rejected() {
        let j = joint(&[("gender", &["F", "M"])], vec![0.0, 0.0]);
        assert_eq!(
            sample_population(&j, 5, &HouseholdSizeDist::point(1), 0).unwrap_err(),
            PopgenError::EmptyJoint
        );
        let j = joint(&[("gender", &["F", "M"])], vec![1.0, 0.0]);
        assert_eq!(
            sample_population(&j, 0, &HouseholdSizeDist::point(1), 0).unwrap_err(),
            PopgenError::EmptyPopulation
        );
    }
}
