//! Attacker/healer skirmish on a small grid against scripted enemies.
//!
//! Each step resolves in a fixed order: moves (allies then enemies, by
//! index; a move into an occupied cell is a no-op), then attacks and heals
//! checked against post-move positions, with all damage landing before any
//! heal. Units that start a step alive act in it even if they die during it.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Environment, StepResult, TimeStep, MAX_EPISODE_STEPS};
use crate::action_space::{
    dynamic_mask, ActionClass, AvailableActionMask, Direction, GroupSpec, LayoutKind,
    SemanticAction, UnifiedActionSpace, NULL_ACTION, STOP_ACTION,
};
use crate::error::{Error, Result};

pub const ATTACKER_HP: f64 = 45.0;
pub const ATTACKER_DAMAGE: f64 = 6.0;
pub const HEALER_HP: f64 = 30.0;
pub const HEAL_AMOUNT: f64 = 5.0;
pub const ACTION_RANGE: i32 = 2;
pub const SIGHT_RANGE: i32 = 4;
pub const KILL_REWARD: f64 = 10.0;
pub const WIN_REWARD: f64 = 200.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum UnitKind {
    Attacker,
    Healer,
}

impl UnitKind {
    pub fn max_hp(self) -> f64 {
        match self {
            UnitKind::Attacker => ATTACKER_HP,
            UnitKind::Healer => HEALER_HP,
        }
    }

    fn one_hot(self) -> [f64; 2] {
        match self {
            UnitKind::Attacker => [1.0, 0.0],
            UnitKind::Healer => [0.0, 1.0],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Unit {
    pub kind: UnitKind,
    pub x: i32,
    pub y: i32,
    pub hp: f64,
}

impl Unit {
    pub fn new(kind: UnitKind, x: i32, y: i32) -> Self {
        Self {
            kind,
            x,
            y,
            hp: kind.max_hp(),
        }
    }

    pub fn alive(&self) -> bool {
        self.hp > 0.0
    }

    fn dist(&self, other: &Unit) -> i32 {
        (self.x - other.x).abs().max((self.y - other.y).abs())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SkirmishConfig {
    #[serde(default = "default_size")]
    pub width: i32,
    #[serde(default = "default_size")]
    pub height: i32,
    #[serde(default = "default_attackers")]
    pub n_attackers: usize,
    #[serde(default = "default_healers")]
    pub n_healers: usize,
    #[serde(default = "default_enemies")]
    pub n_enemies: usize,
    #[serde(default = "default_limit")]
    pub episode_limit: usize,
}

fn default_size() -> i32 {
    12
}
fn default_attackers() -> usize {
    3
}
fn default_healers() -> usize {
    1
}
fn default_enemies() -> usize {
    4
}
fn default_limit() -> usize {
    MAX_EPISODE_STEPS
}

impl Default for SkirmishConfig {
    fn default() -> Self {
        Self {
            width: default_size(),
            height: default_size(),
            n_attackers: default_attackers(),
            n_healers: default_healers(),
            n_enemies: default_enemies(),
            episode_limit: default_limit(),
        }
    }
}

impl SkirmishConfig {
    pub fn n_agents(&self) -> usize {
        self.n_attackers + self.n_healers
    }

    /// Allies spawn in a strip on the left, enemies in a strip on the right.
    fn spawn_zones(&self) -> (Vec<(i32, i32)>, Vec<(i32, i32)>) {
        let (w, h) = (self.width, self.height);
        let ys = (h / 3)..(h - h / 3);
        let left: Vec<_> = (1..(w / 3).max(2))
            .flat_map(|x| ys.clone().map(move |y| (x, y)))
            .collect();
        let right: Vec<_> = (w - w / 3..w - 1)
            .flat_map(|x| ys.clone().map(move |y| (x, y)))
            .collect();
        (left, right)
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.width < 6 || self.height < 6 {
            problems.push("grid must be at least 6x6".to_string());
        }
        if self.n_attackers == 0 {
            problems.push("need at least one attacker".into());
        }
        if self.n_enemies == 0 {
            problems.push("need at least one enemy".into());
        }
        if self.episode_limit == 0 || self.episode_limit > MAX_EPISODE_STEPS {
            problems.push(format!("episode_limit must be in 1..={MAX_EPISODE_STEPS}"));
        }
        if problems.is_empty() {
            let (left, right) = self.spawn_zones();
            if self.n_agents() > left.len() || self.n_enemies > right.len() {
                problems.push(format!(
                    "spawn zones hold {} allies and {} enemies",
                    left.len(),
                    right.len()
                ));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

#[derive(Clone, Debug)]
pub struct Skirmish {
    cfg: SkirmishConfig,
    uas: UnifiedActionSpace,
    allies: Vec<Unit>,
    enemies: Vec<Unit>,
    t: usize,
    done: bool,
}

/// Per-enemy observation features.
const ENEMY_FEATS: usize = 5;
/// Per-ally observation features.
const ALLY_FEATS: usize = 7;
/// Move availability plus own hp and unit type.
const OWN_FEATS: usize = 4 + 3;

impl Skirmish {
    pub fn new(cfg: SkirmishConfig, layout: LayoutKind) -> Result<Self> {
        cfg.validate()?;
        let mut groups = vec![GroupSpec::new(
            0,
            &[ActionClass::EnemyAct],
            (0..cfg.n_attackers).collect(),
        )];
        if cfg.n_healers > 0 {
            groups.push(GroupSpec::new(
                1,
                &[ActionClass::AllyAct],
                (cfg.n_attackers..cfg.n_agents()).collect(),
            ));
        }
        let uas = UnifiedActionSpace::build(&groups, cfg.n_agents(), cfg.n_enemies, layout)?;
        Ok(Self {
            cfg,
            uas,
            allies: Vec::new(),
            enemies: Vec::new(),
            t: 0,
            done: true,
        })
    }

    /// Starts an episode from explicit unit placements.
    pub fn with_units(
        cfg: SkirmishConfig,
        layout: LayoutKind,
        allies: Vec<Unit>,
        enemies: Vec<Unit>,
    ) -> Result<(Self, TimeStep)> {
        let mut env = Self::new(cfg, layout)?;
        if allies.len() != env.cfg.n_agents() || enemies.len() != env.cfg.n_enemies {
            return Err(Error::Config("unit counts do not match the configuration".into()));
        }
        for (i, u) in allies.iter().enumerate() {
            let expected = if i < env.cfg.n_attackers {
                UnitKind::Attacker
            } else {
                UnitKind::Healer
            };
            if u.kind != expected {
                return Err(Error::Config(format!("ally {i} should be {expected:?}")));
            }
        }
        env.allies = allies;
        env.enemies = enemies;
        env.t = 0;
        env.done = false;
        let ts = env.timestep()?;
        Ok((env, ts))
    }

    pub fn config(&self) -> &SkirmishConfig {
        &self.cfg
    }

    pub fn allies(&self) -> &[Unit] {
        &self.allies
    }

    pub fn enemies(&self) -> &[Unit] {
        &self.enemies
    }

    pub fn time(&self) -> usize {
        self.t
    }

    /// Upper bound on one episode's return.
    pub fn max_return(&self) -> f64 {
        self.enemies.iter().map(|e| e.kind.max_hp()).sum::<f64>()
            + KILL_REWARD * self.cfg.n_enemies as f64
            + WIN_REWARD
    }

    fn in_bounds(&self, x: i32, y: i32) -> bool {
        x >= 0 && y >= 0 && x < self.cfg.width && y < self.cfg.height
    }

    fn occupied(&self, x: i32, y: i32) -> bool {
        self.allies
            .iter()
            .chain(&self.enemies)
            .any(|u| u.alive() && u.x == x && u.y == y)
    }

    fn can_move(&self, u: &Unit, d: Direction) -> bool {
        let (dx, dy) = d.delta();
        let (x, y) = (u.x + dx, u.y + dy);
        self.in_bounds(x, y) && !self.occupied(x, y)
    }

    fn availability(&self, agent: usize) -> Result<AvailableActionMask> {
        let size = self.uas.size();
        let mut bits = vec![false; size];
        let me = &self.allies[agent];
        if !me.alive() {
            bits[NULL_ACTION] = true;
        } else {
            bits[STOP_ACTION] = true;
            let g = self.uas.group_index_of(agent);
            for i in 2..size {
                bits[i] = match self.uas.decode(g, i) {
                    Some(SemanticAction::Move(d)) => self.can_move(me, d),
                    Some(SemanticAction::Enemy(j)) => {
                        let e = &self.enemies[j];
                        e.alive() && me.dist(e) <= ACTION_RANGE
                    }
                    Some(SemanticAction::Ally(j)) => {
                        let a = &self.allies[j];
                        j != agent
                            && a.alive()
                            && a.hp < a.kind.max_hp()
                            && me.dist(a) <= ACTION_RANGE
                    }
                    _ => false,
                };
            }
        }
        dynamic_mask(self.uas.agent_static_mask(agent), &bits)
    }

    fn observation(&self, agent: usize) -> Vec<f64> {
        let mut o = vec![0.0; self.obs_dim()];
        let me = self.allies[agent];
        if !me.alive() {
            return o;
        }
        let sight = SIGHT_RANGE as f64;
        for (k, d) in Direction::ALL.iter().enumerate() {
            o[k] = self.can_move(&me, *d) as u8 as f64;
        }
        o[4] = me.hp / me.kind.max_hp();
        o[5..7].copy_from_slice(&me.kind.one_hot());
        let mut off = OWN_FEATS;
        for e in &self.enemies {
            let d = me.dist(e);
            if e.alive() && d <= SIGHT_RANGE {
                o[off] = (d <= ACTION_RANGE) as u8 as f64;
                o[off + 1] = d as f64 / sight;
                o[off + 2] = (e.x - me.x) as f64 / sight;
                o[off + 3] = (e.y - me.y) as f64 / sight;
                o[off + 4] = e.hp / e.kind.max_hp();
            }
            off += ENEMY_FEATS;
        }
        for (j, a) in self.allies.iter().enumerate() {
            if j == agent {
                continue;
            }
            let d = me.dist(a);
            if a.alive() && d <= SIGHT_RANGE {
                o[off] = 1.0;
                o[off + 1] = d as f64 / sight;
                o[off + 2] = (a.x - me.x) as f64 / sight;
                o[off + 3] = (a.y - me.y) as f64 / sight;
                o[off + 4] = a.hp / a.kind.max_hp();
                o[off + 5..off + 7].copy_from_slice(&a.kind.one_hot());
            }
            off += ALLY_FEATS;
        }
        o
    }

    fn state(&self) -> Vec<f64> {
        let (w, h) = (self.cfg.width as f64, self.cfg.height as f64);
        let mut s = Vec::with_capacity(self.state_dim());
        for u in self.allies.iter().chain(&self.enemies) {
            if u.alive() {
                s.extend([u.hp / u.kind.max_hp(), u.x as f64 / w, u.y as f64 / h]);
            } else {
                s.extend([0.0; 3]);
            }
        }
        s.push(self.t as f64 / self.cfg.episode_limit as f64);
        s
    }

    fn timestep(&self) -> Result<TimeStep> {
        let n = self.cfg.n_agents();
        Ok(TimeStep {
            obs: (0..n).map(|i| self.observation(i)).collect(),
            state: self.state(),
            avail: (0..n).map(|i| self.availability(i)).collect::<Result<_>>()?,
            alive: self.allies.iter().map(Unit::alive).collect(),
        })
    }

    /// Nearest living ally to `u` (Chebyshev, ties to the lowest index).
    fn nearest_ally(&self, u: &Unit) -> Option<usize> {
        self.allies
            .iter()
            .enumerate()
            .filter(|(_, a)| a.alive())
            .min_by_key(|(i, a)| (u.dist(a), *i))
            .map(|(i, _)| i)
    }

    /// Scripted enemy decision, made from the positions at step start.
    fn enemy_intent(&self, e: &Unit) -> Intent {
        let Some(target) = self.nearest_ally(e) else {
            return Intent::Stay;
        };
        let a = &self.allies[target];
        if e.dist(a) <= ACTION_RANGE {
            return Intent::Attack(target);
        }
        let (dx, dy) = ((a.x - e.x).signum(), (a.y - e.y).signum());
        let horizontal = if dx > 0 { Direction::Right } else { Direction::Left };
        let vertical = if dy > 0 { Direction::Up } else { Direction::Down };
        let mut prefs = Vec::with_capacity(2);
        if (a.x - e.x).abs() >= (a.y - e.y).abs() {
            if dx != 0 {
                prefs.push(horizontal);
            }
            if dy != 0 {
                prefs.push(vertical);
            }
        } else {
            if dy != 0 {
                prefs.push(vertical);
            }
            if dx != 0 {
                prefs.push(horizontal);
            }
        }
        Intent::Move(prefs)
    }

    fn try_move(&mut self, ally: bool, idx: usize, d: Direction) -> bool {
        let u = if ally { self.allies[idx] } else { self.enemies[idx] };
        let (dx, dy) = d.delta();
        let (x, y) = (u.x + dx, u.y + dy);
        if !self.in_bounds(x, y) || self.occupied(x, y) {
            return false;
        }
        let slot = if ally {
            &mut self.allies[idx]
        } else {
            &mut self.enemies[idx]
        };
        slot.x = x;
        slot.y = y;
        true
    }
}

enum Intent {
    Stay,
    Attack(usize),
    Move(Vec<Direction>),
}

impl Environment for Skirmish {
    fn action_space(&self) -> &UnifiedActionSpace {
        &self.uas
    }

    fn n_agents(&self) -> usize {
        self.cfg.n_agents()
    }

    fn obs_dim(&self) -> usize {
        OWN_FEATS + ENEMY_FEATS * self.cfg.n_enemies + ALLY_FEATS * (self.cfg.n_agents() - 1)
    }

    fn state_dim(&self) -> usize {
        3 * (self.cfg.n_agents() + self.cfg.n_enemies) + 1
    }

    fn episode_limit(&self) -> usize {
        self.cfg.episode_limit
    }

    fn reset(&mut self, seed: u64) -> Result<TimeStep> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (left, right) = self.cfg.spawn_zones();
        let ally_cells: Vec<_> = left.choose_multiple(&mut rng, self.cfg.n_agents()).collect();
        let enemy_cells: Vec<_> = right.choose_multiple(&mut rng, self.cfg.n_enemies).collect();
        self.allies = ally_cells
            .iter()
            .enumerate()
            .map(|(i, &&(x, y))| {
                let kind = if i < self.cfg.n_attackers {
                    UnitKind::Attacker
                } else {
                    UnitKind::Healer
                };
                Unit::new(kind, x, y)
            })
            .collect();
        self.enemies = enemy_cells
            .iter()
            .map(|&&(x, y)| Unit::new(UnitKind::Attacker, x, y))
            .collect();
        self.t = 0;
        self.done = false;
        self.timestep()
    }

    fn step(&mut self, actions: &[usize]) -> Result<StepResult> {
        if self.done {
            return Err(Error::contract("skirmish_step", "episode already finished"));
        }
        let n = self.cfg.n_agents();
        if actions.len() != n {
            return Err(Error::contract(
                "skirmish_step",
                format!("{} actions for {n} agents", actions.len()),
            ));
        }
        let mut decoded = Vec::with_capacity(n);
        for (i, &a) in actions.iter().enumerate() {
            let avail = self.availability(i)?;
            if a >= avail.len() || !avail.get(a) {
                return Err(Error::contract(
                    "skirmish_step",
                    format!("agent {i} took unavailable action {a}"),
                ));
            }
            let g = self.uas.group_index_of(i);
            decoded.push(self.uas.decode(g, a).expect("available actions decode"));
        }
        let intents: Vec<Intent> = self
            .enemies
            .iter()
            .map(|e| if e.alive() { self.enemy_intent(e) } else { Intent::Stay })
            .collect();
        let ally_alive: Vec<bool> = self.allies.iter().map(Unit::alive).collect();
        let enemy_alive: Vec<bool> = self.enemies.iter().map(Unit::alive).collect();

        // Moves.
        for (i, act) in decoded.iter().enumerate() {
            if let SemanticAction::Move(d) = act {
                self.try_move(true, i, *d);
            }
        }
        for (j, intent) in intents.iter().enumerate() {
            if let Intent::Move(prefs) = intent {
                for &d in prefs {
                    if self.try_move(false, j, d) {
                        break;
                    }
                }
            }
        }

        // Attacks and heals against post-move positions.
        let mut enemy_damage = vec![0.0; self.enemies.len()];
        let mut ally_damage = vec![0.0; n];
        let mut heals = vec![0.0; n];
        for (i, act) in decoded.iter().enumerate() {
            if !ally_alive[i] {
                continue;
            }
            let me = self.allies[i];
            match *act {
                SemanticAction::Enemy(j) if enemy_alive[j] => {
                    if me.dist(&self.enemies[j]) <= ACTION_RANGE {
                        enemy_damage[j] += ATTACKER_DAMAGE;
                    }
                }
                SemanticAction::Ally(j) if ally_alive[j] => {
                    if me.dist(&self.allies[j]) <= ACTION_RANGE {
                        heals[j] += HEAL_AMOUNT;
                    }
                }
                _ => {}
            }
        }
        for (j, intent) in intents.iter().enumerate() {
            if let Intent::Attack(target) = *intent {
                if self.enemies[j].dist(&self.allies[target]) <= ACTION_RANGE {
                    ally_damage[target] += ATTACKER_DAMAGE;
                }
            }
        }

        let mut reward = 0.0;
        for (e, dmg) in self.enemies.iter_mut().zip(&enemy_damage) {
            if *dmg > 0.0 && e.alive() {
                let dealt = dmg.min(e.hp);
                e.hp -= dealt;
                reward += dealt;
                if !e.alive() {
                    e.hp = 0.0;
                    reward += KILL_REWARD;
                }
            }
        }
        for (a, dmg) in self.allies.iter_mut().zip(&ally_damage) {
            a.hp = (a.hp - dmg).max(0.0);
        }
        for (a, heal) in self.allies.iter_mut().zip(&heals) {
            if a.alive() {
                a.hp = (a.hp + heal).min(a.kind.max_hp());
            }
        }

        self.t += 1;
        let won = self.enemies.iter().all(|e| !e.alive()) && self.allies.iter().any(Unit::alive);
        let lost = self.allies.iter().all(|a| !a.alive());
        if won {
            reward += WIN_REWARD;
        }
        let truncated = !won && !lost && self.t >= self.cfg.episode_limit;
        let terminated = won || lost || truncated;
        self.done = terminated;
        Ok(StepResult {
            reward,
            terminated,
            truncated,
            won,
            next: self.timestep()?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env() -> Skirmish {
        Skirmish::new(SkirmishConfig::default(), LayoutKind::Unified).unwrap()
    }

    #[test]
    fn reset_is_deterministic_and_full_hp() {
        let mut a = env();
        let mut b = env();
        let ta = a.reset(7).unwrap();
        let tb = b.reset(7).unwrap();
        assert_eq!(ta, tb);
        assert_eq!(a.allies(), b.allies());
        assert!(a.allies().iter().all(|u| u.hp == u.kind.max_hp()));
        assert!(a.enemies().iter().all(|u| u.hp == ATTACKER_HP));
        assert_eq!(a.time(), 0);
        let tc = b.reset(8).unwrap();
        assert_ne!(ta.state, tc.state);
    }

    #[test]
    fn layouts_have_expected_sizes() {
        assert_eq!(env().action_space().size(), 6 + 4 + 4);
        let o = Skirmish::new(SkirmishConfig::default(), LayoutKind::Overlapped).unwrap();
        assert_eq!(o.action_space().size(), 6 + 4);
    }

    #[test]
    fn killing_the_last_enemy_earns_kill_and_win() {
        let cfg = SkirmishConfig::default();
        let allies = vec![
            Unit::new(UnitKind::Attacker, 1, 1),
            Unit::new(UnitKind::Attacker, 1, 3),
            Unit::new(UnitKind::Attacker, 1, 5),
            Unit::new(UnitKind::Healer, 1, 7),
        ];
        let mut enemies = vec![Unit::new(UnitKind::Attacker, 3, 1); 4];
        for (k, e) in enemies.iter_mut().enumerate() {
            e.x = 10;
            e.y = 2 * k as i32 + 1;
            e.hp = 0.0;
        }
        enemies[0] = Unit { kind: UnitKind::Attacker, x: 3, y: 1, hp: 6.0 };
        let (mut env, ts) = Skirmish::with_units(cfg, LayoutKind::Unified, allies, enemies).unwrap();
        let attack = env.action_space().encode(0, SemanticAction::Enemy(0)).unwrap();
        assert!(ts.avail[0].get(attack));
        let stop = STOP_ACTION;
        let r = env.step(&[attack, stop, stop, stop]).unwrap();
        assert_eq!(r.reward, 6.0 + 10.0 + 200.0);
        assert!(r.terminated && r.won && !r.truncated);
    }

    #[test]
    fn damage_lands_before_heals() {
        let cfg = SkirmishConfig {
            n_attackers: 1,
            n_healers: 1,
            n_enemies: 1,
            ..SkirmishConfig::default()
        };
        let mut low = Unit::new(UnitKind::Attacker, 5, 5);
        low.hp = 4.0;
        let allies = vec![low, Unit::new(UnitKind::Healer, 4, 5)];
        let enemies = vec![Unit::new(UnitKind::Attacker, 6, 5)];
        let (mut env, ts) =
            Skirmish::with_units(cfg, LayoutKind::Unified, allies, enemies).unwrap();
        let heal = env.action_space().encode(1, SemanticAction::Ally(0)).unwrap();
        assert!(ts.avail[1].get(heal));
        env.step(&[STOP_ACTION, heal]).unwrap();
        // 4 - 6 < 0: the attacker dies before the heal can land.
        assert_eq!(env.allies()[0].hp, 0.0);
        let next = env.timestep().unwrap();
        assert_eq!(next.avail[0].indices(), vec![NULL_ACTION]);
        assert!(next.obs[0].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn healer_cannot_heal_self_or_full_hp() {
        let mut e = env();
        let ts = e.reset(3).unwrap();
        let uas = e.action_space();
        for j in 0..4 {
            let idx = uas.encode(1, SemanticAction::Ally(j)).unwrap();
            assert!(!ts.avail[3].get(idx));
        }
        assert!(!ts.avail[3].get(NULL_ACTION));
    }

    #[test]
    fn too_many_units_rejected() {
        let cfg = SkirmishConfig {
            n_attackers: 30,
            ..SkirmishConfig::default()
        };
        assert!(matches!(
            Skirmish::new(cfg, LayoutKind::Unified),
            Err(Error::Config(_))
        ));
    }
}
