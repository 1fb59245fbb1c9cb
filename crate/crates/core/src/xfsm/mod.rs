//! Per-entity extended finite state machines.
//!
//! Each state holds an ordered list of rules. On every trigger the rules of
//! the entity's current state are tested in order against the pre-step
//! registers and the current feature vector; the first rule whose condition
//! holds fires. Its actions run in listed order (register writes are visible
//! to later actions of the same rule) and then the transition applies.

use serde::{Deserialize, Serialize};

use crate::features::{eval_condition, eval_feature, EvalContext, Expr, FeatureVector, MetricSource, Trigger};
use crate::pipeline::{EntityKey, PacketView, TimeoutHandle};

pub const DEFAULT_REGISTERS: u32 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExportKind {
    Alert,
    Features,
}

/// A topic the program publishes on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportBinding {
    pub topic: String,
    pub kind: ExportKind,
    /// Features included in payloads; `None` means all.
    pub features: Option<Vec<u32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TemplatePart {
    Text(String),
    Entity,
    State,
    Event,
    Feature(u32),
    Register(u32),
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Template {
    pub parts: Vec<TemplatePart>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ActionSpec {
    PublishAlert {
        export: u32,
        template: Template,
    },
    ExportFeatures {
        export: u32,
    },
    SetRegister {
        index: u32,
        value: Expr,
    },
    ScheduleTimeout {
        delay_ms: u64,
        tag: u32,
    },
    /// `None` cancels every pending timeout of the entity.
    CancelTimeouts {
        tag: Option<u32>,
    },
    ResetMetrics {
        metrics: Vec<u32>,
    },
    DropEntity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    pub condition: Expr,
    pub actions: Vec<ActionSpec>,
    pub next_state: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateTable {
    pub name: String,
    pub rules: Vec<Rule>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct XfsmTable {
    pub states: Vec<StateTable>,
    pub initial_state: u32,
    pub registers: u32,
    pub exports: Vec<ExportBinding>,
    pub feature_names: Vec<String>,
    pub event_names: Vec<String>,
}

impl XfsmTable {
    pub fn state_name(&self, i: u32) -> &str {
        &self.states[i as usize].name
    }

    pub fn state_index(&self, name: &str) -> Option<u32> {
        self.states.iter().position(|s| s.name == name).map(|i| i as u32)
    }

    pub fn trigger_name(&self, t: Trigger) -> String {
        match t {
            Trigger::Event(e) => self.event_names[e as usize].clone(),
            Trigger::Timeout(tag) => format!("timeout({tag})"),
            Trigger::Evicted => "evicted".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntityRecord {
    pub key: EntityKey,
    pub state: u32,
    pub registers: Vec<f64>,
    pub last_seen: u64,
    /// Pending timeouts with their tags.
    pub pending_timeouts: Vec<(TimeoutHandle, u32)>,
}

impl EntityRecord {
    pub fn new(key: EntityKey, table: &XfsmTable, now: u64) -> Self {
        EntityRecord {
            key,
            state: table.initial_state,
            registers: vec![0.0; table.registers as usize],
            last_seen: now,
            pending_timeouts: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmittedKind {
    Alert,
    Features,
}

/// An alert or feature export produced by a fired rule.
#[derive(Debug, Clone, PartialEq)]
pub struct EmittedAction {
    pub kind: EmittedKind,
    pub topic: String,
    pub entity: EntityKey,
    pub entity_text: String,
    pub trigger: String,
    pub state: String,
    pub next_state: String,
    pub message: Option<String>,
    /// Feature snapshot; `None` marks a faulted feature.
    pub features: Vec<(String, Option<f64>)>,
    pub ts: u64,
}

/// Side effects on the runtime, applied by the caller after the step, in order.
#[derive(Debug, Clone, PartialEq)]
pub enum Effect {
    Schedule { delay_ms: u64, tag: u32 },
    Cancel { tag: Option<u32> },
    ResetMetrics(Vec<u32>),
    Drop,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct StepOutput {
    pub fired_rule: Option<usize>,
    pub emitted: Vec<EmittedAction>,
    pub effects: Vec<Effect>,
}

/// Read-only inputs to a step besides the entity and its features.
pub struct StepInput<'a> {
    pub metrics: &'a dyn MetricSource,
    pub packet: Option<&'a PacketView>,
    pub inputs: &'a [Option<f64>],
    pub trigger: Trigger,
    pub now: u64,
    pub entity_text: &'a str,
}

fn fmt_num(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x}"),
        None => "fault".into(),
    }
}

fn render(
    t: &Template,
    table: &XfsmTable,
    entity: &EntityRecord,
    features: &FeatureVector,
    input: &StepInput,
) -> String {
    let mut s = String::new();
    for part in &t.parts {
        match part {
            TemplatePart::Text(x) => s.push_str(x),
            TemplatePart::Entity => s.push_str(input.entity_text),
            TemplatePart::State => s.push_str(table.state_name(entity.state)),
            TemplatePart::Event => s.push_str(&table.trigger_name(input.trigger)),
            TemplatePart::Feature(i) => s.push_str(&fmt_num(features.get(*i as usize))),
            TemplatePart::Register(i) => s.push_str(&fmt_num(entity.registers.get(*i as usize).copied())),
        }
    }
    s
}

fn snapshot(table: &XfsmTable, features: &FeatureVector, subset: Option<&[u32]>) -> Vec<(String, Option<f64>)> {
    match subset {
        Some(ids) => ids.iter().map(|&i| (table.feature_names[i as usize].clone(), features.get(i as usize))).collect(),
        None => table.feature_names.iter().enumerate().map(|(i, n)| (n.clone(), features.get(i))).collect(),
    }
}

/// Take one XFSM step for `entity`. Updates the entity's state and registers;
/// returns emitted actions and the runtime effects to apply.
pub fn step(table: &XfsmTable, entity: &mut EntityRecord, features: &FeatureVector, input: &StepInput) -> StepOutput {
    let state = &table.states[entity.state as usize];
    let fired = {
        let ctx = EvalContext {
            metrics: input.metrics,
            registers: &entity.registers,
            packet: input.packet,
            inputs: input.inputs,
            trigger: input.trigger,
            now: input.now,
        };
        state.rules.iter().position(|r| eval_condition(&r.condition, &ctx, features))
    };
    let Some(rule_idx) = fired else {
        return StepOutput::default();
    };
    let rule = &state.rules[rule_idx];
    let mut out = StepOutput { fired_rule: Some(rule_idx), ..Default::default() };
    for action in &rule.actions {
        match action {
            ActionSpec::PublishAlert { export, template } => {
                let b = &table.exports[*export as usize];
                out.emitted.push(EmittedAction {
                    kind: EmittedKind::Alert,
                    topic: b.topic.clone(),
                    entity: entity.key.clone(),
                    entity_text: input.entity_text.to_string(),
                    trigger: table.trigger_name(input.trigger),
                    state: state.name.clone(),
                    next_state: table.state_name(rule.next_state).to_string(),
                    message: Some(render(template, table, entity, features, input)),
                    features: snapshot(table, features, b.features.as_deref()),
                    ts: input.now,
                });
            }
            ActionSpec::ExportFeatures { export } => {
                let b = &table.exports[*export as usize];
                out.emitted.push(EmittedAction {
                    kind: EmittedKind::Features,
                    topic: b.topic.clone(),
                    entity: entity.key.clone(),
                    entity_text: input.entity_text.to_string(),
                    trigger: table.trigger_name(input.trigger),
                    state: state.name.clone(),
                    next_state: table.state_name(rule.next_state).to_string(),
                    message: None,
                    features: snapshot(table, features, b.features.as_deref()),
                    ts: input.now,
                });
            }
            ActionSpec::SetRegister { index, value } => {
                let v = {
                    let ctx = EvalContext {
                        metrics: input.metrics,
                        registers: &entity.registers,
                        packet: input.packet,
                        inputs: input.inputs,
                        trigger: input.trigger,
                        now: input.now,
                    };
                    eval_feature(value, &ctx, features)
                };
                // A faulted value leaves the register untouched.
                if let Ok(v) = v {
                    entity.registers[*index as usize] = v;
                }
            }
            ActionSpec::ScheduleTimeout { delay_ms, tag } => {
                out.effects.push(Effect::Schedule { delay_ms: *delay_ms, tag: *tag })
            }
            ActionSpec::CancelTimeouts { tag } => out.effects.push(Effect::Cancel { tag: *tag }),
            ActionSpec::ResetMetrics { metrics } => out.effects.push(Effect::ResetMetrics(metrics.clone())),
            ActionSpec::DropEntity => out.effects.push(Effect::Drop),
        }
    }
    entity.state = rule.next_state;
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{CmpOp, NoMetrics};

    fn gt(feature: u32, k: f64) -> Expr {
        Expr::Compare(CmpOp::Gt, Box::new(Expr::Feature(feature)), Box::new(Expr::Const(k)))
    }

    fn table(states: Vec<StateTable>) -> XfsmTable {
        XfsmTable {
            states,
            initial_state: 0,
            registers: 2,
            exports: vec![ExportBinding { topic: "alerts.synflood".into(), kind: ExportKind::Alert, features: None }],
            feature_names: vec!["syn_rate".into()],
            event_names: vec!["tcp_syn".into()],
        }
    }

    fn alert() -> ActionSpec {
        ActionSpec::PublishAlert {
            export: 0,
            template: Template {
                parts: vec![
                    TemplatePart::Text("flood from ".into()),
                    TemplatePart::Entity,
                    TemplatePart::Text(" rate ".into()),
                    TemplatePart::Feature(0),
                ],
            },
        }
    }

    fn input(trigger: Trigger) -> StepInput<'static> {
        StepInput { metrics: &NoMetrics, packet: None, inputs: &[], trigger, now: 42, entity_text: "10.0.0.1" }
    }

    fn entity(t: &XfsmTable) -> EntityRecord {
        EntityRecord::new(EntityKey::new(0, vec![10, 0, 0, 1]), t, 0)
    }

    #[test]
    fn always_true_rule_emits_every_time() {
        let t = table(vec![StateTable {
            name: "only".into(),
            rules: vec![Rule { condition: Expr::Bool(true), actions: vec![alert()], next_state: 0 }],
        }]);
        let mut e = entity(&t);
        let fv = FeatureVector::from_values(vec![1.0]);
        for _ in 0..3 {
            let out = step(&t, &mut e, &fv, &input(Trigger::Event(0)));
            assert_eq!(out.emitted.len(), 1);
        }
    }

    #[test]
    fn threshold_rule_transitions_and_alerts() {
        let t = table(vec![
            StateTable {
                name: "idle".into(),
                rules: vec![Rule { condition: gt(0, 100.0), actions: vec![alert()], next_state: 1 }],
            },
            StateTable { name: "attack".into(), rules: vec![] },
        ]);
        let mut e = entity(&t);
        let out = step(&t, &mut e, &FeatureVector::from_values(vec![150.0]), &input(Trigger::Event(0)));
        assert_eq!(e.state, 1);
        let a = &out.emitted[0];
        assert_eq!(a.topic, "alerts.synflood");
        assert_eq!(a.state, "idle");
        assert_eq!(a.next_state, "attack");
        assert_eq!(a.message.as_deref(), Some("flood from 10.0.0.1 rate 150"));
        assert_eq!(a.features, vec![("syn_rate".to_string(), Some(150.0))]);
        assert_eq!(a.ts, 42);
    }

    #[test]
    fn first_match_wins() {
        let set = |v: f64| ActionSpec::SetRegister { index: 0, value: Expr::Const(v) };
        let t = table(vec![
            StateTable {
                name: "a".into(),
                rules: vec![
                    Rule { condition: Expr::Bool(true), actions: vec![set(1.0)], next_state: 1 },
                    Rule { condition: Expr::Bool(true), actions: vec![set(2.0)], next_state: 0 },
                ],
            },
            StateTable { name: "b".into(), rules: vec![] },
        ]);
        let mut e = entity(&t);
        let out = step(&t, &mut e, &FeatureVector::default(), &input(Trigger::Event(0)));
        assert_eq!(out.fired_rule, Some(0));
        assert_eq!(e.registers[0], 1.0);
        assert_eq!(e.state, 1);
    }

    #[test]
    fn conditions_read_pre_step_registers_actions_see_writes() {
        // rule 0: reg0 == 0 -> reg0 := 5; reg1 := reg0 + 1
        let reg = |i| Box::new(Expr::Register(i));
        let t = table(vec![StateTable {
            name: "s".into(),
            rules: vec![Rule {
                condition: Expr::Compare(CmpOp::Eq, reg(0), Box::new(Expr::Const(0.0))),
                actions: vec![
                    ActionSpec::SetRegister { index: 0, value: Expr::Const(5.0) },
                    ActionSpec::SetRegister {
                        index: 1,
                        value: Expr::Binary(crate::features::BinaryOp::Add, reg(0), Box::new(Expr::Const(1.0))),
                    },
                ],
                next_state: 0,
            }],
        }]);
        let mut e = entity(&t);
        step(&t, &mut e, &FeatureVector::default(), &input(Trigger::Event(0)));
        assert_eq!(e.registers, vec![5.0, 6.0]);
        let out = step(&t, &mut e, &FeatureVector::default(), &input(Trigger::Event(0)));
        assert_eq!(out.fired_rule, None);
    }

    #[test]
    fn no_rule_fires_keeps_state() {
        let t = table(vec![StateTable {
            name: "idle".into(),
            rules: vec![Rule { condition: gt(0, 100.0), actions: vec![alert()], next_state: 0 }],
        }]);
        let mut e = entity(&t);
        let out = step(&t, &mut e, &FeatureVector::with_len(1), &input(Trigger::Event(0)));
        assert_eq!(out, StepOutput::default());
        assert_eq!(e.state, 0);
    }

    #[test]
    fn effects_are_returned_in_order() {
        let t = table(vec![StateTable {
            name: "s".into(),
            rules: vec![Rule {
                condition: Expr::Bool(true),
                actions: vec![
                    ActionSpec::CancelTimeouts { tag: Some(1) },
                    ActionSpec::ScheduleTimeout { delay_ms: 10, tag: 1 },
                    ActionSpec::DropEntity,
                ],
                next_state: 0,
            }],
        }]);
        let mut e = entity(&t);
        let out = step(&t, &mut e, &FeatureVector::default(), &input(Trigger::Timeout(1)));
        assert_eq!(
            out.effects,
            vec![Effect::Cancel { tag: Some(1) }, Effect::Schedule { delay_ms: 10, tag: 1 }, Effect::Drop]
        );
    }
}
