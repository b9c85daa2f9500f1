#![allow(dead_code)]

use std::sync::OnceLock;

use wip_core::ocp::*;
use wip_core::params::ParamSet;

pub const VARINT_DYN: Transcription = Transcription {
    method: Method::Varint,
    current: CurrentModel::Dynamic,
};

/// 1 m straight ahead with a halfway waypoint, over 5 s. The 4 s version is
/// infeasible under the voltage-rate limit.
pub fn desk_spec(p: &ParamSet) -> PathSpec {
    make_translation_spec(1.0, 250, 0.02, p.bounds)
}

pub fn desk_plan() -> &'static (OcpProblem, OcpSolution) {
    static PLAN: OnceLock<(OcpProblem, OcpSolution)> = OnceLock::new();
    PLAN.get_or_init(|| {
        let p = ParamSet::default();
        let prob = build_ocp(&desk_spec(&p), &p, VARINT_DYN).unwrap();
        let sol = solve(&prob, &initial_guess(&prob), &SolverOptions::default()).unwrap();
        (prob, sol)
    })
}
