use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::Vec2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Obstacle {
    pub center: Vec2,
    pub radius: f64,
}

impl Obstacle {
    pub fn new(x: f64, y: f64, radius: f64) -> Self {
        Self {
            center: Vec2::new(x, y),
            radius,
        }
    }

    /// Distance from `p` to the disc boundary; negative inside.
    pub fn clearance(&self, p: &Vec2) -> f64 {
        (p - self.center).norm() - self.radius
    }

    pub fn contains(&self, p: &Vec2) -> bool {
        self.clearance(p) < 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bounds {
    pub min: Vec2,
    pub max: Vec2,
}

impl Bounds {
    pub fn contains(&self, p: &Vec2) -> bool {
        p.x >= self.min.x && p.y >= self.min.y && p.x <= self.max.x && p.y <= self.max.y
    }
}

/// A planar world of disc obstacles with a start, goal, and speed bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub obstacles: Vec<Obstacle>,
    pub start: Vec2,
    pub goal: Vec2,
    pub v_bar: f64,
    pub goal_tolerance: f64,
    pub bounds: Bounds,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        let finite = |v: &Vec2| v.x.is_finite() && v.y.is_finite();
        if !(self.v_bar > 0.0 && self.v_bar.is_finite()) {
            return Err(Error::invalid(format!(
                "scenario {:?}: v_bar must be > 0",
                self.name
            )));
        }
        if !(self.goal_tolerance > 0.0) {
            return Err(Error::invalid(format!(
                "scenario {:?}: goal_tolerance must be > 0",
                self.name
            )));
        }
        if !(finite(&self.bounds.min) && finite(&self.bounds.max))
            || self.bounds.min.x >= self.bounds.max.x
            || self.bounds.min.y >= self.bounds.max.y
        {
            return Err(Error::invalid(format!(
                "scenario {:?}: bounds are empty",
                self.name
            )));
        }
        for (what, p) in [("start", &self.start), ("goal", &self.goal)] {
            if !finite(p) || !self.bounds.contains(p) {
                return Err(Error::invalid(format!(
                    "scenario {:?}: {what} lies outside the bounds",
                    self.name
                )));
            }
        }
        for (i, o) in self.obstacles.iter().enumerate() {
            if !(o.radius > 0.0 && o.radius.is_finite()) || !finite(&o.center) {
                return Err(Error::invalid(format!(
                    "scenario {:?}: obstacle {i} needs a finite radius > 0",
                    self.name
                )));
            }
            if o.contains(&self.start) {
                return Err(Error::invalid(format!(
                    "scenario {:?}: start lies inside obstacle {i}",
                    self.name
                )));
            }
        }
        Ok(())
    }

    /// Smallest clearance from `p` to any obstacle (infinite in an empty world).
    pub fn clearance(&self, p: &Vec2) -> f64 {
        self.obstacles
            .iter()
            .map(|o| o.clearance(p))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let s: Scenario = toml::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }
}
