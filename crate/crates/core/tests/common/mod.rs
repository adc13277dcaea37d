#![allow(dead_code)]

use std::collections::BTreeSet;
use std::sync::Arc;

use chrono::{TimeZone, Utc};
use maci_core::model::{Direction, MetricDeclaration, ParamValue, ParameterDefinition, ParameterKind};
use maci_core::orchestrator::{ManualClock, NewStudy, NewTemplate, Orchestrator, RetryPolicy};

pub fn num(v: f64) -> ParamValue {
    ParamValue::number(v).unwrap()
}

pub fn clock() -> Arc<ManualClock> {
    Arc::new(ManualClock::new(Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap()))
}

pub fn orchestrator(policy: RetryPolicy) -> (Orchestrator, Arc<ManualClock>) {
    let c = clock();
    (Orchestrator::in_memory(policy, c.clone()), c)
}

/// The DASH design: four configuration and two environment parameters.
pub fn dash_template() -> NewTemplate {
    use ParameterKind::*;
    NewTemplate {
        name: "dash".into(),
        script: "#!/bin/sh\nexit 0\n".into(),
        parameters: vec![
            ParameterDefinition::new("player", Configuration, vec!["DASH.JS".into(), "Shaka".into(), "AStream".into()]),
            ParameterDefinition::new("adapt_algo", Configuration, vec!["Standard".into(), "BOLA".into()]),
            ParameterDefinition::new(
                "segment_length",
                Configuration,
                [1.0, 2.0, 6.0, 10.0, 15.0].map(num).to_vec(),
            )
            .with_unit("s"),
            ParameterDefinition::new("target_buffer", Configuration, vec!["Default".into(), num(5.0), num(20.0)]).with_unit("s"),
            ParameterDefinition::new("mu_bw", Environment, [0.8, 2.0, 5.0, 7.5, 10.0].map(num).to_vec()).with_unit("Mbps"),
            ParameterDefinition::new("sigma2_bw", Environment, [0.0, 0.8, 2.0, 5.0].map(num).to_vec()).with_unit("Mbps^2"),
        ],
        declared_metrics: vec![
            MetricDeclaration { name: "stallings".into(), direction: Direction::Minimize, unit: None },
            MetricDeclaration { name: "video_quality".into(), direction: Direction::Maximize, unit: None },
        ],
    }
}

/// One parameter `x` with `values` and a metric `m`.
pub fn small_template(values: usize) -> NewTemplate {
    NewTemplate {
        name: "small".into(),
        script: "#!/bin/sh\nexit 0\n".into(),
        parameters: vec![ParameterDefinition::new(
            "x",
            ParameterKind::Configuration,
            (0..values).map(|v| num(v as f64)).collect(),
        )],
        declared_metrics: vec![MetricDeclaration { name: "m".into(), direction: Direction::Maximize, unit: None }],
    }
}

pub fn study_of(o: &Orchestrator, template: NewTemplate, repetitions: u32) -> maci_core::model::Study {
    let t = o.create_template(template).unwrap();
    o.create_study(NewStudy {
        template_id: t.id,
        bound_values: Default::default(),
        repetitions,
        base_seed: 1,
        provenance: Default::default(),
    })
    .unwrap()
}

pub fn labels() -> BTreeSet<String> {
    BTreeSet::new()
}
