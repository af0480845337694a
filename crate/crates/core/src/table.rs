//! Losses indexed by coalition.
//!
//! Players are kept sorted; coalition `mask` has bit `i` set when
//! `players[i]` is a member, so enumeration in mask order is the binary
//! counter order over the sorted feature list.

use serde::{Deserialize, Serialize};

use crate::design::Coalition;
use crate::error::{MarketError, Result};

/// Hard limit on the number of players a dense table can index.
pub const MAX_PLAYERS: usize = 24;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "TableRepr", try_from = "TableRepr")]
pub struct CoalitionLossTable {
    players: Vec<String>,
    losses: Vec<Option<f64>>,
}

impl CoalitionLossTable {
    pub fn new(players: &[String]) -> Result<Self> {
        let mut players = players.to_vec();
        players.sort();
        let before = players.len();
        players.dedup();
        if players.len() != before {
            return Err(MarketError::Parameter("duplicate player names".into()));
        }
        if players.len() > MAX_PLAYERS {
            return Err(MarketError::CapExceeded {
                features: players.len(),
                cap: MAX_PLAYERS,
            });
        }
        let size = 1usize << players.len();
        Ok(CoalitionLossTable {
            players,
            losses: vec![None; size],
        })
    }

    /// Fills every coalition from `loss(mask)`.
    pub fn from_masks(players: &[String], mut loss: impl FnMut(usize) -> f64) -> Result<Self> {
        let mut table = CoalitionLossTable::new(players)?;
        for (mask, slot) in table.losses.iter_mut().enumerate() {
            *slot = Some(loss(mask));
        }
        Ok(table)
    }

    pub fn players(&self) -> &[String] {
        &self.players
    }

    pub fn n_players(&self) -> usize {
        self.players.len()
    }

    pub fn n_coalitions(&self) -> usize {
        self.losses.len()
    }

    pub fn full_mask(&self) -> usize {
        self.losses.len() - 1
    }

    pub fn mask_of(&self, coalition: &Coalition) -> Result<usize> {
        let mut mask = 0;
        for m in coalition.members() {
            let i = self
                .players
                .iter()
                .position(|p| p == m)
                .ok_or_else(|| MarketError::Lookup(m.clone()))?;
            mask |= 1 << i;
        }
        Ok(mask)
    }

    pub fn coalition_of(&self, mask: usize) -> Coalition {
        self.players
            .iter()
            .enumerate()
            .filter(|(i, _)| mask & (1 << i) != 0)
            .map(|(_, p)| p.clone())
            .collect()
    }

    pub fn set_mask(&mut self, mask: usize, loss: f64) {
        self.losses[mask] = Some(loss);
    }

    pub fn insert(&mut self, coalition: &Coalition, loss: f64) -> Result<()> {
        let mask = self.mask_of(coalition)?;
        self.set_mask(mask, loss);
        Ok(())
    }

    pub fn loss_mask(&self, mask: usize) -> Option<f64> {
        self.losses.get(mask).copied().flatten()
    }

    pub fn get(&self, coalition: &Coalition) -> Option<f64> {
        self.mask_of(coalition).ok().and_then(|m| self.loss_mask(m))
    }

    /// Loss of the empty coalition (central agent alone).
    pub fn central_loss(&self) -> Option<f64> {
        self.loss_mask(0)
    }

    /// Loss of the grand coalition.
    pub fn full_loss(&self) -> Option<f64> {
        self.loss_mask(self.full_mask())
    }

    pub fn missing(&self) -> Vec<Coalition> {
        self.losses
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_none())
            .map(|(m, _)| self.coalition_of(m))
            .collect()
    }

    /// Dense loss vector; errors with the missing coalitions otherwise.
    pub fn dense(&self) -> Result<Vec<f64>> {
        let missing = self.missing();
        if !missing.is_empty() {
            return Err(MarketError::Coverage(missing.iter().map(ToString::to_string).collect()));
        }
        Ok(self.losses.iter().map(|l| l.expect("checked")).collect())
    }

    pub fn entries(&self) -> impl Iterator<Item = (Coalition, f64)> + '_ {
        self.losses
            .iter()
            .enumerate()
            .filter_map(|(m, l)| l.map(|l| (self.coalition_of(m), l)))
    }
}

#[derive(Serialize, Deserialize)]
struct TableRepr {
    players: Vec<String>,
    entries: Vec<TableEntry>,
}

#[derive(Serialize, Deserialize)]
struct TableEntry {
    coalition: Coalition,
    loss: f64,
}

impl From<CoalitionLossTable> for TableRepr {
    fn from(t: CoalitionLossTable) -> Self {
        TableRepr {
            entries: t
                .entries()
                .map(|(coalition, loss)| TableEntry { coalition, loss })
                .collect(),
            players: t.players,
        }
    }
}

impl TryFrom<TableRepr> for CoalitionLossTable {
    type Error = MarketError;

    fn try_from(r: TableRepr) -> Result<Self> {
        let mut t = CoalitionLossTable::new(&r.players)?;
        for e in r.entries {
            t.insert(&e.coalition, e.loss)?;
        }
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn binary_counter_order() {
        let t = CoalitionLossTable::from_masks(&names(&["x3", "x2"]), |m| m as f64).unwrap();
        assert_eq!(t.players(), &names(&["x2", "x3"])[..]);
        assert_eq!(t.coalition_of(1).to_string(), "{x2}");
        assert_eq!(t.coalition_of(3).to_string(), "{x2,x3}");
        assert_eq!(t.get(&Coalition::from_iter(["x3"])), Some(2.0));
        assert_eq!(t.central_loss(), Some(0.0));
        assert_eq!(t.full_loss(), Some(3.0));
    }

    #[test]
    fn missing_entries_reported() {
        let mut t = CoalitionLossTable::new(&names(&["a", "b"])).unwrap();
        t.insert(&Coalition::empty(), 1.0).unwrap();
        t.insert(&Coalition::from_iter(["a", "b"]), 0.5).unwrap();
        match t.dense().unwrap_err() {
            MarketError::Coverage(m) => assert_eq!(m, vec!["{a}".to_string(), "{b}".to_string()]),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn json_round_trip() {
        let t = CoalitionLossTable::from_masks(&names(&["a", "b", "c"]), |m| 1.0 / (1 + m) as f64).unwrap();
        let s = serde_json::to_string(&t).unwrap();
        let back: CoalitionLossTable = serde_json::from_str(&s).unwrap();
        assert_eq!(back, t);
    }
}
