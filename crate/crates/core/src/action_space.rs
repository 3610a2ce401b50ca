//! Unified action space, available-action masks and the masking-policy
//! operator.
//!
//! Every agent's network emits one vector over the unified space. A group's
//! static mask selects the self block plus the blocks of its capabilities;
//! the environment's per-step availability narrows it further.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::softmax_in_place;
use crate::grad::MASK_SENTINEL;

/// Number of self actions: null, stop and four moves.
pub const SELF_ACTIONS: usize = 6;
pub const NULL_ACTION: usize = 0;
pub const STOP_ACTION: usize = 1;

/// What an action affects.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ActionClass {
    SelfAct,
    AllyAct,
    EnemyAct,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    Up,
    Down,
    Left,
    Right,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::Up, Direction::Down, Direction::Left, Direction::Right];

    pub fn delta(self) -> (i32, i32) {
        match self {
            Direction::Up => (0, 1),
            Direction::Down => (0, -1),
            Direction::Left => (-1, 0),
            Direction::Right => (1, 0),
        }
    }
}

/// An action index decoded for a particular group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SemanticAction {
    Null,
    Stop,
    Move(Direction),
    Ally(usize),
    Enemy(usize),
    /// The k-th action of a group whose block carries no target semantics.
    Choice(usize),
}

/// How groups' target actions are laid out on the network output.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayoutKind {
    /// Every semantic class gets its own block.
    #[default]
    Unified,
    /// Ally and enemy targets (or group choice blocks) share indices.
    Overlapped,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub id: usize,
    pub capabilities: Vec<ActionClass>,
    pub agent_ids: Vec<usize>,
}

impl GroupSpec {
    /// Self actions are always part of a group's capabilities.
    pub fn new(id: usize, capabilities: &[ActionClass], agent_ids: Vec<usize>) -> Self {
        let mut caps = vec![ActionClass::SelfAct];
        for &c in capabilities {
            if !caps.contains(&c) {
                caps.push(c);
            }
        }
        caps.sort();
        Self {
            id,
            capabilities: caps,
            agent_ids,
        }
    }

    pub fn can(&self, class: ActionClass) -> bool {
        self.capabilities.contains(&class)
    }
}

/// Binary availability vector over the unified space.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct AvailableActionMask {
    bits: Vec<bool>,
}

impl AvailableActionMask {
    pub fn new(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    pub fn empty(size: usize) -> Self {
        Self { bits: vec![false; size] }
    }

    pub fn full(size: usize) -> Self {
        Self { bits: vec![true; size] }
    }

    pub fn from_indices(size: usize, indices: impl IntoIterator<Item = usize>) -> Self {
        let mut m = Self::empty(size);
        for i in indices {
            m.bits[i] = true;
        }
        m
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn set(&mut self, i: usize, on: bool) {
        self.bits[i] = on;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn any(&self) -> bool {
        self.bits.iter().any(|&b| b)
    }

    pub fn indices(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }

    pub fn and(&self, other: &AvailableActionMask) -> AvailableActionMask {
        Self {
            bits: self.bits.iter().zip(&other.bits).map(|(&a, &b)| a && b).collect(),
        }
    }

    /// `self` is bitwise at most `other`.
    pub fn is_subset_of(&self, other: &AvailableActionMask) -> bool {
        self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    fn require_nonempty(&self, op: &'static str) -> Result<()> {
        if self.any() {
            Ok(())
        } else {
            Err(Error::contract(op, "mask has no available action"))
        }
    }
}

/// Normalized distribution over the unified space.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyDistribution {
    pub probs: Vec<f64>,
}

impl PolicyDistribution {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let dist = WeightedIndex::new(&self.probs).expect("normalized distribution");
        dist.sample(rng)
    }

    /// Greedy action; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax_lowest(self.probs.iter().copied().enumerate())
    }

    /// Entropy over the support.
    pub fn entropy(&self) -> f64 {
        -self.probs.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
    }
}

/// Unnormalized action values over the unified space.
#[derive(Clone, Debug, PartialEq)]
pub struct QVector {
    pub values: Vec<f64>,
}

/// Whether `mask_policy` receives raw logits or a distribution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputKind {
    Logits,
    Distribution,
}

fn argmax_lowest(it: impl Iterator<Item = (usize, f64)>) -> usize {
    let mut best = None;
    for (i, v) in it {
        match best {
            Some((_, bv)) if v <= bv => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i).unwrap_or(0)
}

/// The masking-policy operator.
///
/// Logits are filled with a large negative sentinel where unavailable and
/// softmaxed; distributions have unavailable entries zeroed and are
/// renormalized.
pub fn mask_policy(
    values: &[f64],
    mask: &AvailableActionMask,
    kind: InputKind,
) -> Result<PolicyDistribution> {
    if values.len() != mask.len() {
        return Err(Error::contract(
            "mask_policy",
            format!("{} values for a mask of {}", values.len(), mask.len()),
        ));
    }
    mask.require_nonempty("mask_policy")?;
    let mut probs: Vec<f64> = match kind {
        InputKind::Logits => {
            let mut row: Vec<f64> = values
                .iter()
                .zip(mask.bits())
                .map(|(&v, &m)| if m { v } else { MASK_SENTINEL })
                .collect();
            softmax_in_place(&mut row);
            row
        }
        InputKind::Distribution => {
            if values.iter().any(|&v| v < 0.0 || !v.is_finite()) {
                return Err(Error::contract("mask_policy", "distribution has a negative entry"));
            }
            let kept: Vec<f64> = values
                .iter()
                .zip(mask.bits())
                .map(|(&v, &m)| if m { v } else { 0.0 })
                .collect();
            let total: f64 = kept.iter().sum();
            if total <= 0.0 {
                return Err(Error::DegenerateMask(
                    "no probability mass left on available actions".into(),
                ));
            }
            kept.into_iter().map(|v| v / total).collect()
        }
    };
    for (p, &m) in probs.iter_mut().zip(mask.bits()) {
        if !m {
            *p = 0.0;
        }
    }
    Ok(PolicyDistribution { probs })
}

/// Greedy action over available indices only; ties go to the lowest index.
pub fn mask_q_argmax(q: &[f64], mask: &AvailableActionMask) -> Result<usize> {
    if q.len() != mask.len() {
        return Err(Error::contract(
            "mask_q_argmax",
            format!("{} values for a mask of {}", q.len(), mask.len()),
        ));
    }
    mask.require_nonempty("mask_q_argmax")?;
    Ok(argmax_lowest(
        q.iter().copied().enumerate().filter(|&(i, _)| mask.get(i)),
    ))
}

/// Intersects a static group mask with per-step availability.
pub fn dynamic_mask(
    static_mask: &AvailableActionMask,
    env_availability: &[bool],
) -> Result<AvailableActionMask> {
    if env_availability.len() != static_mask.len() {
        return Err(Error::contract(
            "dynamic_mask",
            format!("{} availability bits for a mask of {}", env_availability.len(), static_mask.len()),
        ));
    }
    let out = static_mask.and(&AvailableActionMask::new(env_availability.to_vec()));
    out.require_nonempty("dynamic_mask")?;
    Ok(out)
}

/// A contiguous run of indices sharing one meaning.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionBlock {
    pub label: String,
    pub class: Option<ActionClass>,
    pub offset: usize,
    pub len: usize,
}

/// Output layout shared by every agent plus each group's static mask.
#[derive(Clone, Debug, PartialEq)]
pub struct UnifiedActionSpace {
    kind: LayoutKind,
    size: usize,
    blocks: Vec<ActionBlock>,
    groups: Vec<GroupSpec>,
    static_masks: Vec<AvailableActionMask>,
    agent_group: Vec<usize>,
    has_self_block: bool,
}

#[derive(Serialize)]
struct GroupDoc<'a> {
    id: usize,
    capabilities: &'a [ActionClass],
    agent_ids: &'a [usize],
    mask: Vec<usize>,
}

#[derive(Serialize)]
struct SpaceDoc<'a> {
    kind: LayoutKind,
    size: usize,
    blocks: &'a [ActionBlock],
    groups: Vec<GroupDoc<'a>>,
}

fn agent_index(groups: &[GroupSpec]) -> Result<Vec<usize>> {
    let n: usize = groups.iter().map(|g| g.agent_ids.len()).sum();
    let mut agent_group = vec![usize::MAX; n];
    for (gi, g) in groups.iter().enumerate() {
        for &a in &g.agent_ids {
            if a >= n || agent_group[a] != usize::MAX {
                return Err(Error::Config(format!(
                    "agent ids must partition 0..{n}; agent {a} is out of range or repeated"
                )));
            }
            agent_group[a] = gi;
        }
    }
    Ok(agent_group)
}

impl UnifiedActionSpace {
    /// Builds the self / ally / enemy layout.
    ///
    /// Target blocks exist only for classes some group can use. With
    /// [`LayoutKind::Overlapped`] ally and enemy targets share one block, so a
    /// group may then hold at most one target class.
    pub fn build(
        groups: &[GroupSpec],
        n_allies: usize,
        n_enemies: usize,
        kind: LayoutKind,
    ) -> Result<Self> {
        if groups.is_empty() {
            return Err(Error::contract("build_uas", "no groups"));
        }
        let agent_group = agent_index(groups)?;
        let uses = |c| groups.iter().any(|g| g.can(c));
        let ally_len = if uses(ActionClass::AllyAct) { n_allies } else { 0 };
        let enemy_len = if uses(ActionClass::EnemyAct) { n_enemies } else { 0 };

        let mut blocks = vec![ActionBlock {
            label: "self".into(),
            class: Some(ActionClass::SelfAct),
            offset: 0,
            len: SELF_ACTIONS,
        }];
        let size = match kind {
            LayoutKind::Unified => {
                blocks.push(ActionBlock {
                    label: "ally".into(),
                    class: Some(ActionClass::AllyAct),
                    offset: SELF_ACTIONS,
                    len: ally_len,
                });
                blocks.push(ActionBlock {
                    label: "enemy".into(),
                    class: Some(ActionClass::EnemyAct),
                    offset: SELF_ACTIONS + ally_len,
                    len: enemy_len,
                });
                SELF_ACTIONS + ally_len + enemy_len
            }
            LayoutKind::Overlapped => {
                if let Some(g) = groups
                    .iter()
                    .find(|g| g.can(ActionClass::AllyAct) && g.can(ActionClass::EnemyAct))
                {
                    return Err(Error::Config(format!(
                        "group {} has both target classes; the overlapped layout cannot tell them apart",
                        g.id
                    )));
                }
                blocks.push(ActionBlock {
                    label: "target".into(),
                    class: None,
                    offset: SELF_ACTIONS,
                    len: ally_len.max(enemy_len),
                });
                SELF_ACTIONS + ally_len.max(enemy_len)
            }
        };

        let static_masks = groups
            .iter()
            .map(|g| {
                let mut m = AvailableActionMask::empty(size);
                (0..SELF_ACTIONS).for_each(|i| m.set(i, true));
                let (ally_off, enemy_off) = match kind {
                    LayoutKind::Unified => (SELF_ACTIONS, SELF_ACTIONS + ally_len),
                    LayoutKind::Overlapped => (SELF_ACTIONS, SELF_ACTIONS),
                };
                if g.can(ActionClass::AllyAct) {
                    (ally_off..ally_off + ally_len).for_each(|i| m.set(i, true));
                }
                if g.can(ActionClass::EnemyAct) {
                    (enemy_off..enemy_off + enemy_len).for_each(|i| m.set(i, true));
                }
                m
            })
            .collect();

        Ok(Self {
            kind,
            size,
            blocks,
            groups: groups.to_vec(),
            static_masks,
            agent_group,
            has_self_block: true,
        })
    }

    /// Layout for groups whose actions are plain choices with no self block:
    /// group `g` owns `block_lens[g]` actions. Unified gives each group its own
    /// block (in the order listed); overlapped stacks them all from index 0.
    pub fn from_choice_blocks(
        groups: &[GroupSpec],
        block_lens: &[usize],
        kind: LayoutKind,
    ) -> Result<Self> {
        if groups.is_empty() {
            return Err(Error::contract("from_choice_blocks", "no groups"));
        }
        if groups.len() != block_lens.len() {
            return Err(Error::contract("from_choice_blocks", "one block length per group"));
        }
        let agent_group = agent_index(groups)?;
        let mut blocks = Vec::new();
        let mut static_masks = Vec::new();
        let size = match kind {
            LayoutKind::Unified => block_lens.iter().sum(),
            LayoutKind::Overlapped => block_lens.iter().copied().max().unwrap_or(0),
        };
        let mut offset = 0;
        for (g, &len) in groups.iter().zip(block_lens) {
            let start = match kind {
                LayoutKind::Unified => offset,
                LayoutKind::Overlapped => 0,
            };
            blocks.push(ActionBlock {
                label: format!("group{}", g.id),
                class: None,
                offset: start,
                len,
            });
            static_masks.push(AvailableActionMask::from_indices(size, start..start + len));
            offset += len;
        }
        Ok(Self {
            kind,
            size,
            blocks,
            groups: groups.to_vec(),
            static_masks,
            agent_group,
            has_self_block: false,
        })
    }

    pub fn kind(&self) -> LayoutKind {
        self.kind
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn blocks(&self) -> &[ActionBlock] {
        &self.blocks
    }

    pub fn groups(&self) -> &[GroupSpec] {
        &self.groups
    }

    pub fn n_agents(&self) -> usize {
        self.agent_group.len()
    }

    pub fn has_self_block(&self) -> bool {
        self.has_self_block
    }

    /// Position of the agent's group in [`Self::groups`].
    pub fn group_index_of(&self, agent: usize) -> usize {
        self.agent_group[agent]
    }

    pub fn static_mask(&self, group_index: usize) -> &AvailableActionMask {
        &self.static_masks[group_index]
    }

    pub fn agent_static_mask(&self, agent: usize) -> &AvailableActionMask {
        &self.static_masks[self.agent_group[agent]]
    }

    /// Static masks of every group other than `group_index`, labeled by group id.
    pub fn inverse_masks(&self, group_index: usize) -> Vec<(usize, &AvailableActionMask)> {
        self.groups
            .iter()
            .zip(&self.static_masks)
            .enumerate()
            .filter(|(gi, _)| *gi != group_index)
            .map(|(_, (g, m))| (g.id, m))
            .collect()
    }

    fn block(&self, class: ActionClass) -> Option<&ActionBlock> {
        self.blocks.iter().find(|b| b.class == Some(class))
    }

    fn target_block(&self, class: ActionClass) -> Option<&ActionBlock> {
        match self.kind {
            LayoutKind::Unified => self.block(class),
            LayoutKind::Overlapped => self.blocks.iter().find(|b| b.label == "target"),
        }
    }

    /// Meaning of `index` for an agent of group `group_index`.
    pub fn decode(&self, group_index: usize, index: usize) -> Option<SemanticAction> {
        if index >= self.size || !self.static_masks[group_index].get(index) {
            return None;
        }
        if !self.has_self_block {
            let b = &self.blocks[group_index];
            return Some(SemanticAction::Choice(index - b.offset));
        }
        match index {
            NULL_ACTION => return Some(SemanticAction::Null),
            STOP_ACTION => return Some(SemanticAction::Stop),
            2..=5 => return Some(SemanticAction::Move(Direction::ALL[index - 2])),
            _ => {}
        }
        let g = &self.groups[group_index];
        for (class, make) in [
            (ActionClass::EnemyAct, SemanticAction::Enemy as fn(usize) -> SemanticAction),
            (ActionClass::AllyAct, SemanticAction::Ally),
        ] {
            if !g.can(class) {
                continue;
            }
            if let Some(b) = self.target_block(class) {
                if index >= b.offset && index < b.offset + b.len {
                    return Some(make(index - b.offset));
                }
            }
        }
        None
    }

    /// Index of a semantic action for group `group_index`, if the group has it.
    pub fn encode(&self, group_index: usize, action: SemanticAction) -> Option<usize> {
        let index = match action {
            SemanticAction::Null if self.has_self_block => NULL_ACTION,
            SemanticAction::Stop if self.has_self_block => STOP_ACTION,
            SemanticAction::Move(d) if self.has_self_block => {
                2 + Direction::ALL.iter().position(|&x| x == d)?
            }
            SemanticAction::Ally(j) => {
                let b = self.target_block(ActionClass::AllyAct)?;
                (j < b.len).then_some(b.offset + j)?
            }
            SemanticAction::Enemy(j) => {
                let b = self.target_block(ActionClass::EnemyAct)?;
                (j < b.len).then_some(b.offset + j)?
            }
            SemanticAction::Choice(k) if !self.has_self_block => {
                let b = &self.blocks[group_index];
                (k < b.len).then_some(b.offset + k)?
            }
            _ => return None,
        };
        self.static_masks[group_index].get(index).then_some(index)
    }

    /// JSON document with block offsets and per-group mask index lists.
    pub fn to_json(&self) -> String {
        let doc = SpaceDoc {
            kind: self.kind,
            size: self.size,
            blocks: &self.blocks,
            groups: self
                .groups
                .iter()
                .zip(&self.static_masks)
                .map(|(g, m)| GroupDoc {
                    id: g.id,
                    capabilities: &g.capabilities,
                    agent_ids: &g.agent_ids,
                    mask: m.indices(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&doc).expect("plain data serializes")
    }
}
