//! Command-line front end. Every JSON artifact is wrapped as
//! `{"schema": ..., "data": ...}` and written with fixed field order, so
//! identical invocations give identical bytes.
//!
//! Exit codes: 0 success, 1 a check or construction failed, 2 bad usage or
//! unreadable input.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::embedpipe::{
    export_stage, init_stage, refine_stage, stage_from_json, verify_stage, EmbeddingStage, ExportFormat, PipelineSpec, Schedule,
    StageReport, SvgOptions,
};
use crate::geomcore::{parse_rational, serde_q, serde_qopt, serde_qvec, Rational};
use crate::knaster::{build_example_instance, composant_evidence, ILPoint, InverseSystem};
use crate::plmap::{PLMap, PLMapDoc};
use crate::tentfactor::{branch_fixed_point, build_s, choose_patterns, FactorInstance};
use crate::tuck::{build_half_plane_arc, verify_half_plane_arc, ArcReport, HalfPlaneArc};
use crate::visor::{
    all_visors_removable, max_target, minimal_removal_interval, visor_cells, visor_components, Cell, MarkedSet, MinimalInterval,
    RemovabilityReport, VisorComponent,
};

pub const MAP_SCHEMA: &str = "plembed.map/1";
pub const FACTOR_SCHEMA: &str = "plembed.factor/1";
pub const VISORS_SCHEMA: &str = "plembed.visors/1";
pub const TUCK_SCHEMA: &str = "plembed.tuck/1";
pub const EXAMPLE_SCHEMA: &str = "plembed.example/1";
pub const COMPOSANTS_SCHEMA: &str = "plembed.composants/1";
pub const EMBED_SCHEMA: &str = "plembed.embed/1";
pub const REPORT_SCHEMA: &str = "plembed.report/1";

fn parse_q(s: &str) -> Result<Rational, String> {
    parse_rational(s).map_err(|e| e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "plembed", version, about = "Exact PL interval maps, visor removal and stagewise plane embeddings")]
pub struct RunConfig {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ScheduleArg {
    AllAtOnce,
    OnePerStage,
}

impl From<ScheduleArg> for Schedule {
    fn from(s: ScheduleArg) -> Self {
        match s {
            ScheduleArg::AllAtOnce => Schedule::AllAtOnce,
            ScheduleArg::OnePerStage => Schedule::OnePerStage,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// The tent map T_m as a map artifact.
    Tent {
        #[arg(long)]
        m: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Factorization s with T_{2n-1} ∘ s = T_m for the example marked points.
    Factor {
        #[arg(long)]
        n: usize,
        /// defaults to the least admissible power of two
        #[arg(long)]
        m: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Visor components, minimal intervals and targets.
    Visors {
        #[arg(long)]
        map: PathBuf,
        #[arg(long, value_delimiter = ',', value_parser = parse_q, required = true)]
        z: Vec<Rational>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Half-plane arc for (f, Z, eps), with its verification report.
    Tuck {
        #[arg(long)]
        map: PathBuf,
        #[arg(long, value_delimiter = ',', value_parser = parse_q, required = true)]
        z: Vec<Rational>,
        #[arg(long, value_parser = parse_q)]
        eps: Rational,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// The self-map instance f = s ∘ T_{2n-1} with its fixed points.
    KnasterExample {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Composant evidence between two constant threads.
    Composants {
        /// bonding map T_m at every level
        #[arg(long, conflicts_with = "map")]
        m: Option<u64>,
        /// bonding map read from a file
        #[arg(long)]
        map: Option<PathBuf>,
        #[arg(long, value_parser = parse_q)]
        p: Rational,
        #[arg(long, value_parser = parse_q)]
        q: Rational,
        #[arg(long)]
        horizon: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Runs the stage pipeline and writes stage-<i>.json, stage-<i>.svg and
    /// embed.json into the output directory.
    Embed {
        /// use the example instance for this n
        #[arg(long, conflicts_with = "map")]
        n: Option<usize>,
        /// self-map read from a file; needs --fixed
        #[arg(long, requires = "fixed")]
        map: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', value_parser = parse_q)]
        fixed: Vec<Rational>,
        #[arg(long)]
        depth: usize,
        #[arg(long, value_parser = parse_q, default_value = "1/4")]
        eps1: Rational,
        #[arg(long, value_enum, default_value = "all-at-once")]
        schedule: ScheduleArg,
        #[arg(long, default_value_t = 12)]
        precision: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-checks a stage file; with --prev and --map also the step bound.
    Verify {
        #[arg(long)]
        stage: PathBuf,
        #[arg(long, requires = "map")]
        prev: Option<PathBuf>,
        #[arg(long, requires = "prev")]
        map: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Renders a stage file as SVG.
    Svg {
        #[arg(long)]
        stage: PathBuf,
        #[arg(long, default_value_t = 12)]
        precision: usize,
        #[arg(long, default_value_t = 800)]
        width: u32,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Artifact<T> {
    pub schema: String,
    pub data: T,
}

impl<T> Artifact<T> {
    pub fn new(schema: &str, data: T) -> Self {
        Artifact { schema: schema.into(), data }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactorArtifact {
    pub instance: FactorInstance,
    #[serde(with = "serde_qvec")]
    pub zprime: Vec<Rational>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellReport {
    pub cell: Cell,
    pub minimal_interval: Option<MinimalInterval>,
    #[serde(with = "serde_qopt")]
    pub max_target: Option<Rational>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisorsArtifact {
    pub map: PLMap,
    pub z: MarkedSet,
    pub components: Vec<VisorComponent>,
    pub cells: Vec<CellReport>,
    pub summary: RemovabilityReport,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TuckArtifact {
    #[serde(with = "serde_q")]
    pub eps: Rational,
    pub arc: HalfPlaneArc,
    pub report: ArcReport,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComposantsArtifact {
    pub map: PLMap,
    #[serde(with = "serde_q")]
    pub p: Rational,
    #[serde(with = "serde_q")]
    pub q: Rational,
    pub horizon: usize,
    pub evidence: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbedArtifact {
    pub map: PLMap,
    #[serde(with = "serde_qvec")]
    pub fixed: Vec<Rational>,
    pub depth: usize,
    #[serde(with = "serde_q")]
    pub eps1: Rational,
    pub schedule: Schedule,
    pub stages: Vec<String>,
    pub reports: Vec<StageReport>,
}

#[derive(Debug)]
enum CliError {
    /// bad arguments or unreadable input
    Usage(String),
    /// a construction or check failed
    Failed(String),
}

type CliResult = Result<i32, CliError>;

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read {}: {}", path.display(), e)))
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("artifact serializes");
    s.push('\n');
    s
}

fn emit(text: &str, out: Option<&Path>) -> Result<(), CliError> {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| CliError::Usage(format!("cannot write {}: {}", p.display(), e))),
        None => {
            print!("{}", text);
            Ok(())
        }
    }
}

fn emit_json<T: Serialize>(schema: &str, data: T, out: Option<&Path>) -> Result<(), CliError> {
    emit(&to_json(&Artifact::new(schema, data)), out)
}

/// Reads a map from either a map artifact or a bare `{"breakpoints": ...}`.
pub fn load_map(text: &str) -> Result<PLMap, String> {
    if let Ok(e) = parse_artifact::<EmbedArtifact>(text, EMBED_SCHEMA) {
        return Ok(e.map);
    }
    if let Ok(a) = serde_json::from_str::<Artifact<PLMap>>(text) {
        if a.schema != MAP_SCHEMA {
            return Err(format!("expected schema {:?}, found {:?}", MAP_SCHEMA, a.schema));
        }
        return Ok(a.data);
    }
    let doc: PLMapDoc = serde_json::from_str(text).map_err(|e| e.to_string())?;
    PLMap::from_doc(&doc).map_err(|e| e.to_string())
}

fn map_file(path: &Path) -> Result<PLMap, CliError> {
    load_map(&read(path)?).map_err(|e| CliError::Usage(format!("{}: {}", path.display(), e)))
}

fn marked(z: Vec<Rational>) -> Result<MarkedSet, CliError> {
    let mut z = z;
    z.sort();
    MarkedSet::new(z).map_err(|e| CliError::Usage(e.to_string()))
}

/// Parses an artifact of a known schema, checking the schema tag.
pub fn parse_artifact<T: DeserializeOwned>(text: &str, schema: &str) -> Result<T, String> {
    let a: Artifact<T> = serde_json::from_str(text).map_err(|e| e.to_string())?;
    if a.schema != schema {
        return Err(format!("expected schema {:?}, found {:?}", schema, a.schema));
    }
    Ok(a.data)
}

fn factor(n: usize, m: Option<u64>) -> Result<FactorArtifact, CliError> {
    let fail = |e: String| CliError::Failed(e);
    let m = m.unwrap_or(1u64 << crate::knaster::example_k(n.max(1)));
    let plan = choose_patterns(m, n).map_err(|e| fail(e.to_string()))?;
    let mut z = Vec::with_capacity(n);
    for (idx, p) in plan.patterns.iter().enumerate() {
        let (lo, hi) = p.rising_half(idx as u64 + 1);
        z.push(branch_fixed_point(m, &lo, &hi).map_err(|e| fail(e.to_string()))?);
    }
    let z = MarkedSet::new(z).map_err(|e| fail(e.to_string()))?;
    let instance = build_s(m, &z, &plan).map_err(|e| fail(e.to_string()))?;
    let zprime = instance.images();
    Ok(FactorArtifact { instance, zprime })
}

fn visors(f: PLMap, z: MarkedSet) -> Result<VisorsArtifact, CliError> {
    let fail = |e: crate::visor::VisorError| CliError::Failed(e.to_string());
    let components = visor_components(&f, &z).map_err(fail)?;
    let mut cells = Vec::new();
    for cell in visor_cells(&f, &z).map_err(fail)? {
        let v = cell.representative();
        let mi = minimal_removal_interval(&f, &z, &v).ok();
        let max_target = mi.as_ref().and_then(|mi| max_target(&f, &z, &v, mi).ok());
        cells.push(CellReport { cell, minimal_interval: mi, max_target });
    }
    let summary = all_visors_removable(&f, &z).map_err(fail)?;
    Ok(VisorsArtifact { map: f, z, components, cells, summary })
}

fn stage_name(i: usize) -> String {
    format!("stage-{}.json", i)
}

#[allow(clippy::too_many_arguments)]
fn embed(
    n: Option<usize>,
    map: Option<&Path>,
    fixed: Vec<Rational>,
    depth: usize,
    eps1: Rational,
    schedule: Schedule,
    precision: usize,
    out: &Path,
) -> CliResult {
    if depth == 0 {
        return Err(CliError::Usage("depth must be at least 1".into()));
    }
    let (f, fixed) = match (n, map) {
        (Some(n), None) => {
            let inst = build_example_instance(n).map_err(|e| CliError::Failed(e.to_string()))?;
            (inst.f, inst.zprime)
        }
        (None, Some(p)) => (map_file(p)?, fixed),
        _ => return Err(CliError::Usage("give exactly one of --n or --map".into())),
    };
    if fixed.iter().any(|z| f.eval(z).ok().as_ref() != Some(z)) {
        return Err(CliError::Usage("every --fixed point must be fixed by the map".into()));
    }
    fs::create_dir_all(out).map_err(|e| CliError::Usage(format!("cannot create {}: {}", out.display(), e)))?;
    let spec = PipelineSpec::self_map(&f, &fixed, depth, eps1.clone(), schedule);
    let opts = SvgOptions { precision, ..SvgOptions::default() };
    let mut stages: Vec<String> = Vec::new();
    let mut reports: Vec<StageReport> = Vec::new();
    let mut prev: Option<EmbeddingStage> = None;
    let mut failure = None;
    for i in 1..=depth {
        let z = spec.marked_at(i).map_err(|e| CliError::Usage(e.to_string()))?;
        let built = match &prev {
            None => init_stage(&spec.maps[0], &z, &spec.eps_at(i)),
            Some(p) => refine_stage(p, &spec.maps[i - 1], &z, &spec.eps_at(i)),
        };
        let stage = match built {
            Ok(s) => s,
            Err(e) => {
                failure = Some(format!("stage {}: {}", i, e));
                break;
            }
        };
        let report = verify_stage(&stage, prev.as_ref().map(|p| (p, &spec.maps[i - 1])));
        emit(&export_stage(&stage, ExportFormat::Json, &opts), Some(&out.join(stage_name(i))))?;
        emit(&export_stage(&stage, ExportFormat::Svg, &opts), Some(&out.join(format!("stage-{}.svg", i))))?;
        stages.push(stage_name(i));
        let ok = report.all_pass();
        reports.push(report);
        if !ok {
            failure = Some(format!("stage {} failed verification", i));
            break;
        }
        prev = Some(stage);
    }
    let art = EmbedArtifact { map: f, fixed, depth, eps1, schedule, stages, reports };
    emit_json(EMBED_SCHEMA, art, Some(&out.join("embed.json")))?;
    match failure {
        Some(msg) => Err(CliError::Failed(msg)),
        None => Ok(0),
    }
}

fn load_stage(path: &Path) -> Result<EmbeddingStage, CliError> {
    // unreadable files are usage errors; a file that no longer parses or
    // matches its digest fails verification
    stage_from_json(&read(path)?).map_err(|e| CliError::Failed(format!("{}: {}", path.display(), e)))
}

fn dispatch(cfg: RunConfig) -> CliResult {
    match cfg.command {
        Command::Tent { m, out } => {
            if m == 0 {
                return Err(CliError::Usage("m must be positive".into()));
            }
            emit_json(MAP_SCHEMA, PLMap::tent(m), out.as_deref())?;
            Ok(0)
        }
        Command::Factor { n, m, out } => {
            if n == 0 {
                return Err(CliError::Usage("n must be positive".into()));
            }
            emit_json(FACTOR_SCHEMA, factor(n, m)?, out.as_deref())?;
            Ok(0)
        }
        Command::Visors { map, z, out } => {
            let art = visors(map_file(&map)?, marked(z)?)?;
            emit_json(VISORS_SCHEMA, art, out.as_deref())?;
            Ok(0)
        }
        Command::Tuck { map, z, eps, out } => {
            let f = map_file(&map)?;
            let z = marked(z)?;
            let arc = build_half_plane_arc(&f, &z, &eps).map_err(|e| CliError::Failed(e.to_string()))?;
            let report = verify_half_plane_arc(&f, &z, &eps, &arc);
            let pass = report.all_pass();
            emit_json(TUCK_SCHEMA, TuckArtifact { eps, arc, report }, out.as_deref())?;
            Ok(if pass { 0 } else { 1 })
        }
        Command::KnasterExample { n, out } => {
            if n == 0 {
                return Err(CliError::Usage("n must be positive".into()));
            }
            let inst = build_example_instance(n).map_err(|e| CliError::Failed(e.to_string()))?;
            emit_json(EXAMPLE_SCHEMA, inst, out.as_deref())?;
            Ok(0)
        }
        Command::Composants { m, map, p, q, horizon, out } => {
            let f = match (m, map) {
                (Some(m), None) if m > 0 => PLMap::tent(m),
                (None, Some(path)) => map_file(&path)?,
                _ => return Err(CliError::Usage("give exactly one of --m (positive) or --map".into())),
            };
            let sys = InverseSystem::constant(f.clone());
            let (a, b) = (ILPoint::constant(p.clone()), ILPoint::constant(q.clone()));
            let evidence = composant_evidence(&sys, &a, &b, horizon).map_err(|e| CliError::Failed(e.to_string()))?;
            emit_json(COMPOSANTS_SCHEMA, ComposantsArtifact { map: f, p, q, horizon, evidence }, out.as_deref())?;
            Ok(0)
        }
        Command::Embed { n, map, fixed, depth, eps1, schedule, precision, out } => {
            embed(n, map.as_deref(), fixed, depth, eps1, schedule.into(), precision, &out)
        }
        Command::Verify { stage, prev, map, out } => {
            let s = load_stage(&stage)?;
            let report = match (prev, map) {
                (Some(p), Some(m)) => {
                    let prev = load_stage(&p)?;
                    let f = map_file(&m)?;
                    verify_stage(&s, Some((&prev, &f)))
                }
                _ => verify_stage(&s, None),
            };
            let pass = report.all_pass();
            emit_json(REPORT_SCHEMA, report, out.as_deref())?;
            Ok(if pass { 0 } else { 1 })
        }
        Command::Svg { stage, precision, width, out } => {
            let s = load_stage(&stage)?;
            let opts = SvgOptions { precision, width };
            emit(&export_stage(&s, ExportFormat::Svg, &opts), out.as_deref())?;
            Ok(0)
        }
    }
}

/// Parses arguments (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cfg = match RunConfig::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cfg) {
        Ok(code) => code,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {}", msg);
            2
        }
        Err(CliError::Failed(msg)) => {
            eprintln!("failed: {}", msg);
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geomcore::q;

    fn run_args(args: &[&str]) -> i32 {
        run(std::iter::once("plembed").chain(args.iter().copied()))
    }

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(run_args(&[]), 2);
        assert_eq!(run_args(&["tent"]), 2);
        assert_eq!(run_args(&["visors", "--map", "/nonexistent/f.json", "--z", "5/8"]), 2);
        assert_eq!(run_args(&["tuck", "--map", "x.json", "--z", "1/2", "--eps", "abc"]), 2);
        assert_eq!(run_args(&["no-such-command"]), 2);
    }

    #[test]
    fn map_loading_accepts_both_forms() {
        let t4 = PLMap::tent(4);
        let art = to_json(&Artifact::new(MAP_SCHEMA, t4.clone()));
        assert_eq!(load_map(&art).unwrap(), t4);
        let bare = serde_json::to_string(&t4.to_doc()).unwrap();
        assert_eq!(load_map(&bare).unwrap(), t4);
        let wrong = to_json(&Artifact::new(FACTOR_SCHEMA, t4));
        assert!(load_map(&wrong).is_err());
        let emb = EmbedArtifact {
            map: PLMap::tent(4),
            fixed: vec![q(0, 1)],
            depth: 1,
            eps1: q(1, 4),
            schedule: Schedule::AllAtOnce,
            stages: vec![],
            reports: vec![],
        };
        assert_eq!(load_map(&to_json(&Artifact::new(EMBED_SCHEMA, emb))).unwrap(), PLMap::tent(4));
    }

    #[test]
    fn factor_two() {
        let a = factor(2, None).unwrap();
        assert_eq!(a.instance.m, 16);
        assert_eq!(a.zprime, vec![q(2, 45), q(4, 5)]);
    }

    #[test]
    fn visors_tent4() {
        let art = visors(PLMap::tent(4), MarkedSet::new(vec![q(5, 8)]).unwrap()).unwrap();
        assert_eq!(art.components.len(), 1);
        assert_eq!((&art.components[0].lo, &art.components[0].hi), (&q(1, 8), &q(3, 8)));
        let mi = art.cells[0].minimal_interval.as_ref().unwrap();
        assert_eq!((&mi.a, &mi.b), (&q(0, 1), &q(1, 2)));
        assert_eq!(art.cells[0].max_target, Some(q(1, 1)));
        assert!(art.summary.removable);
    }
}
