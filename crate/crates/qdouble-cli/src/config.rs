//! JSON configuration loading, validation, and experiment dispatch.
//!
//! A run is described by a single JSON file; nothing outside that file and
//! the explicit seed affects the numbers in a report. Validation errors
//! carry a JSON-pointer-style path (`$.geometry.OZ.path[2]`) so a bad
//! field can be found without rereading the whole file.

use std::fmt;
use std::path::PathBuf;
use std::sync::Arc;

use serde::Deserialize;
use serde_json::Value;

use qdouble::experiments::{
    abelian_braiding, default_abelian_geometry, default_deformed_loop, default_elongation_setup,
    default_nonabelian_setup, default_restricted_ops, elongation_check, nonabelian_braiding,
    prepare_verify, purification_report, restricted_demo, un_check, AbelianGeometry, BraidSetup,
    DemoOp, ElongationSetup, ExperimentError, ExperimentReport, Tolerances, EXPERIMENTS,
};
use qdouble::lattice::full_teeth_loop;
use qdouble::{
    Context, FiniteGroup, GroupElement, Lattice, Sign, StringSpec, Tooth, ToothSide,
};

/// Default seed for the sampling experiments when the config omits one.
const DEFAULT_SEED: u64 = 7;
/// Default sample count for the elongation conjugation check.
const DEFAULT_SAMPLES: usize = 200;
/// Default qubit range for the interferometer recursion check.
const DEFAULT_MAX_N: usize = 6;

/// A configuration problem: the JSON path of the offending field and what
/// is wrong with it.
#[derive(Debug)]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

impl ConfigError {
    fn new(path: impl Into<String>, message: impl fmt::Display) -> Self {
        ConfigError { path: path.into(), message: message.to_string() }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    experiment: String,
    #[serde(default)]
    group: Option<GroupConfig>,
    #[serde(default)]
    lattice: Option<LatticeConfig>,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default)]
    tolerance: Option<f64>,
    #[serde(default)]
    strict_tolerance: Option<f64>,
    #[serde(default)]
    output: Option<PathBuf>,
    #[serde(default)]
    geometry: Option<Value>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GroupConfig {
    #[serde(default)]
    builtin: Option<String>,
    #[serde(default)]
    n: Option<usize>,
    #[serde(default)]
    file: Option<PathBuf>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields, tag = "type", rename_all = "lowercase")]
enum LatticeConfig {
    Torus { lx: usize, ly: usize },
}

/// Picks a group element by label or index.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ElementSel {
    #[serde(default)]
    label: Option<String>,
    #[serde(default)]
    index: Option<usize>,
}

impl ElementSel {
    fn resolve(&self, group: &FiniteGroup, path: &str) -> Result<GroupElement, ConfigError> {
        match (&self.label, self.index) {
            (Some(label), None) => group
                .elements()
                .find(|&g| group.label(g) == label)
                .ok_or_else(|| {
                    let labels: Vec<&str> = group.elements().map(|g| group.label(g)).collect();
                    ConfigError::new(
                        format!("{path}.label"),
                        format!("no element labeled `{label}`; labels: {}", labels.join(", ")),
                    )
                }),
            (None, Some(index)) => group
                .element(index)
                .map_err(|e| ConfigError::new(format!("{path}.index"), e)),
            _ => Err(ConfigError::new(
                path,
                "specify exactly one of `label` or `index`",
            )),
        }
    }
}

/// Compact string-operator notation: signed base edges, teeth as
/// [edge, attach, side] triples.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct StringSpecDto {
    base: Vec<(usize, String)>,
    #[serde(default)]
    teeth: Vec<(usize, usize, String)>,
    closed: bool,
}

fn parse_sign(s: &str, path: &str) -> Result<Sign, ConfigError> {
    match s {
        "+" => Ok(Sign::Plus),
        "-" => Ok(Sign::Minus),
        other => Err(ConfigError::new(path, format!("expected \"+\" or \"-\", got `{other}`"))),
    }
}

fn parse_side(s: &str, path: &str) -> Result<ToothSide, ConfigError> {
    match s {
        "out" => Ok(ToothSide::Out),
        "in" => Ok(ToothSide::In),
        other => Err(ConfigError::new(path, format!("expected \"out\" or \"in\", got `{other}`"))),
    }
}

impl StringSpecDto {
    fn to_spec(&self, path: &str) -> Result<StringSpec, ConfigError> {
        let base = self
            .base
            .iter()
            .enumerate()
            .map(|(i, (edge, sign))| {
                Ok((*edge, parse_sign(sign, &format!("{path}.base[{i}]"))?))
            })
            .collect::<Result<Vec<_>, ConfigError>>()?;
        let teeth = self
            .teeth
            .iter()
            .enumerate()
            .map(|(i, (edge, attach, side))| {
                Ok(Tooth {
                    edge: *edge,
                    attach: *attach,
                    side: parse_side(side, &format!("{path}.teeth[{i}]"))?,
                })
            })
            .collect::<Result<Vec<_>, ConfigError>>()?;
        Ok(StringSpec { base, teeth, closed: self.closed })
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AbelianGeoDto {
    #[serde(rename = "OZ")]
    oz: OzDto,
    #[serde(rename = "OX")]
    ox: OxDto,
    #[serde(rename = "WX")]
    wx: WxDto,
    #[serde(default)]
    detect_face: Option<usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct OzDto {
    path: Vec<usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct OxDto {
    dual_path: Vec<usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct WxDto {
    around: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LoopAroundDto {
    face: usize,
    base_vertex: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NonabelianGeoDto {
    g: ElementSel,
    h: ElementSel,
    #[serde(rename = "loop", default)]
    loop_spec: Option<StringSpecDto>,
    #[serde(default)]
    loop_around: Option<LoopAroundDto>,
    #[serde(default)]
    string: Option<StringSpecDto>,
    #[serde(default)]
    detect_face: Option<usize>,
    #[serde(default)]
    deformed_loop: Option<StringSpecDto>,
    /// Also run the canonical two-face deformation of the default loop.
    #[serde(default)]
    deform_default: bool,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RestrictedGeoDto {
    ops: Vec<DemoOpDto>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields, tag = "type", rename_all = "snake_case")]
enum DemoOpDto {
    Channel { vertex: usize },
    Gauge { vertex: usize, g: ElementSel },
    XString { edges: Vec<usize> },
    ZString { edges: Vec<usize> },
    Comb { g: ElementSel, string: StringSpecDto },
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ElongationGeoDto {
    #[serde(default)]
    string: Option<StringSpecDto>,
    #[serde(default)]
    extension: Option<(usize, String)>,
    #[serde(default)]
    control: Option<usize>,
    #[serde(default)]
    targets: Option<Vec<usize>>,
    #[serde(default)]
    samples: Option<usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct UnGeoDto {
    max_n: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PurificationGeoDto {
    degree: usize,
}

/// A fully resolved run: typed inputs for one experiment driver.
pub enum Job {
    PrepareVerify { ctx: Arc<Context> },
    BraidAbelian { ctx: Arc<Context>, geometry: AbelianGeometry },
    BraidNonabelian { ctx: Arc<Context>, setup: Box<BraidSetup> },
    Restricted { ctx: Arc<Context>, ops: Vec<DemoOp> },
    Elongation { ctx: Arc<Context>, setup: Box<ElongationSetup> },
    Un { max_n: usize },
    Purification { group: FiniteGroup, degree: usize, seed: u64 },
}

pub struct RunPlan {
    pub job: Job,
    pub tols: Tolerances,
    pub output: Option<PathBuf>,
}

fn parse_geometry<D: serde::de::DeserializeOwned>(
    geometry: &Option<Value>,
) -> Result<Option<D>, ConfigError> {
    match geometry {
        None => Ok(None),
        Some(value) => serde_json::from_value(value.clone())
            .map(Some)
            .map_err(|e| ConfigError::new("$.geometry", e)),
    }
}

fn resolve_group(config: &ConfigFile) -> Result<FiniteGroup, ConfigError> {
    let group = config
        .group
        .as_ref()
        .ok_or_else(|| ConfigError::new("$.group", "required for this experiment"))?;
    match (&group.builtin, &group.file) {
        (Some(name), None) => FiniteGroup::builtin(name, group.n)
            .map_err(|e| ConfigError::new("$.group.builtin", e)),
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                ConfigError::new("$.group.file", format!("cannot read {}: {e}", path.display()))
            })?;
            qdouble::group::parse_group(&text)
                .map_err(|e| ConfigError::new("$.group.file", e))
        }
        _ => Err(ConfigError::new("$.group", "specify exactly one of `builtin` or `file`")),
    }
}

fn resolve_lattice(config: &ConfigFile) -> Result<Lattice, ConfigError> {
    let lattice = config
        .lattice
        .as_ref()
        .ok_or_else(|| ConfigError::new("$.lattice", "required for this experiment"))?;
    match lattice {
        LatticeConfig::Torus { lx, ly } => {
            Lattice::torus(*lx, *ly).map_err(|e| ConfigError::new("$.lattice", e))
        }
    }
}

fn resolve_context(config: &ConfigFile) -> Result<Arc<Context>, ConfigError> {
    let group = resolve_group(config)?;
    let lattice = resolve_lattice(config)?;
    Context::new(group, lattice).map_err(|e| ConfigError::new("$.lattice", e))
}

fn check_vertex(lattice: &Lattice, v: usize, path: String) -> Result<(), ConfigError> {
    if v < lattice.vertex_count() {
        Ok(())
    } else {
        Err(ConfigError::new(
            path,
            format!("vertex {v} out of range ({} vertices)", lattice.vertex_count()),
        ))
    }
}

fn check_face(lattice: &Lattice, f: usize, path: String) -> Result<(), ConfigError> {
    if f < lattice.face_count() {
        Ok(())
    } else {
        Err(ConfigError::new(
            path,
            format!("face {f} out of range ({} faces)", lattice.face_count()),
        ))
    }
}

fn geometry_error(err: ExperimentError) -> ConfigError {
    ConfigError::new("$.geometry", err)
}

/// Parses and validates a configuration file, resolving every default.
/// `seed_override` takes precedence over the config's own seed.
pub fn load(text: &str, seed_override: Option<u64>) -> Result<RunPlan, ConfigError> {
    let config: ConfigFile =
        serde_json::from_str(text).map_err(|e| ConfigError::new("$", e))?;

    if qdouble::experiments::experiment_info(&config.experiment).is_none() {
        let names: Vec<&str> = EXPERIMENTS.iter().map(|i| i.name).collect();
        return Err(ConfigError::new(
            "$.experiment",
            format!("unknown experiment `{}`; valid names: {}", config.experiment, names.join(", ")),
        ));
    }

    let mut tols = Tolerances::default();
    if let Some(t) = config.tolerance {
        if !(t > 0.0) {
            return Err(ConfigError::new("$.tolerance", "must be a positive number"));
        }
        tols.main = t;
    }
    if let Some(t) = config.strict_tolerance {
        if !(t > 0.0) {
            return Err(ConfigError::new("$.strict_tolerance", "must be a positive number"));
        }
        tols.strict = t;
    }
    let seed = seed_override.or(config.seed).unwrap_or(DEFAULT_SEED);

    let job = match config.experiment.as_str() {
        "prepare-verify" => {
            if config.geometry.is_some() {
                return Err(ConfigError::new("$.geometry", "prepare-verify takes no geometry"));
            }
            Job::PrepareVerify { ctx: resolve_context(&config)? }
        }
        "braid-abelian" => {
            let ctx = resolve_context(&config)?;
            let lattice = ctx.lattice();
            let geometry = match parse_geometry::<AbelianGeoDto>(&config.geometry)? {
                None => default_abelian_geometry(lattice).map_err(geometry_error)?,
                Some(dto) => {
                    for (i, &v) in dto.oz.path.iter().enumerate() {
                        check_vertex(lattice, v, format!("$.geometry.OZ.path[{i}]"))?;
                    }
                    for (i, &f) in dto.ox.dual_path.iter().enumerate() {
                        check_face(lattice, f, format!("$.geometry.OX.dual_path[{i}]"))?;
                    }
                    check_vertex(lattice, dto.wx.around, "$.geometry.WX.around".into())?;
                    if let Some(f) = dto.detect_face {
                        check_face(lattice, f, "$.geometry.detect_face".into())?;
                    }
                    AbelianGeometry {
                        oz_path: dto.oz.path,
                        ox_dual_path: dto.ox.dual_path,
                        wx_around: dto.wx.around,
                        detect_face: dto.detect_face,
                    }
                }
            };
            Job::BraidAbelian { ctx, geometry }
        }
        "braid-nonabelian" => {
            let ctx = resolve_context(&config)?;
            let lattice = ctx.lattice();
            let dto = parse_geometry::<NonabelianGeoDto>(&config.geometry)?.ok_or_else(|| {
                ConfigError::new("$.geometry", "required (at least `g` and `h`)")
            })?;
            let g = dto.g.resolve(ctx.group(), "$.geometry.g")?;
            let h = dto.h.resolve(ctx.group(), "$.geometry.h")?;
            let mut setup = default_nonabelian_setup(lattice, g, h).map_err(geometry_error)?;
            match (&dto.loop_spec, &dto.loop_around) {
                (Some(_), Some(_)) => {
                    return Err(ConfigError::new(
                        "$.geometry",
                        "specify at most one of `loop` and `loop_around`",
                    ));
                }
                (Some(spec), None) => setup.loop_spec = spec.to_spec("$.geometry.loop")?,
                (None, Some(around)) => {
                    check_face(lattice, around.face, "$.geometry.loop_around.face".into())?;
                    check_vertex(
                        lattice,
                        around.base_vertex,
                        "$.geometry.loop_around.base_vertex".into(),
                    )?;
                    let boundary = lattice
                        .face_boundary(around.face, around.base_vertex)
                        .map_err(|e| ConfigError::new("$.geometry.loop_around", e))?;
                    setup.loop_spec = full_teeth_loop(lattice, boundary)
                        .map_err(|e| ConfigError::new("$.geometry.loop_around", e))?;
                }
                (None, None) => {}
            }
            if let Some(spec) = &dto.string {
                setup.string_spec = spec.to_spec("$.geometry.string")?;
            }
            if let Some(face) = dto.detect_face {
                check_face(lattice, face, "$.geometry.detect_face".into())?;
                setup.detect_face = face;
            }
            if dto.deformed_loop.is_some() && dto.deform_default {
                return Err(ConfigError::new(
                    "$.geometry",
                    "specify at most one of `deformed_loop` and `deform_default`",
                ));
            }
            if let Some(spec) = &dto.deformed_loop {
                setup.deformed_loop = Some(spec.to_spec("$.geometry.deformed_loop")?);
            } else if dto.deform_default {
                setup.deformed_loop = Some(default_deformed_loop(lattice).map_err(geometry_error)?);
            }
            Job::BraidNonabelian { ctx, setup: Box::new(setup) }
        }
        "restricted" => {
            let ctx = resolve_context(&config)?;
            let ops = match parse_geometry::<RestrictedGeoDto>(&config.geometry)? {
                None => default_restricted_ops(&ctx).map_err(geometry_error)?,
                Some(dto) => {
                    let group = ctx.group();
                    dto.ops
                        .iter()
                        .enumerate()
                        .map(|(i, op)| {
                            let path = format!("$.geometry.ops[{i}]");
                            Ok(match op {
                                DemoOpDto::Channel { vertex } => {
                                    check_vertex(ctx.lattice(), *vertex, format!("{path}.vertex"))?;
                                    DemoOp::Channel { vertex: *vertex }
                                }
                                DemoOpDto::Gauge { vertex, g } => {
                                    check_vertex(ctx.lattice(), *vertex, format!("{path}.vertex"))?;
                                    DemoOp::Gauge {
                                        vertex: *vertex,
                                        g: g.resolve(group, &format!("{path}.g"))?,
                                    }
                                }
                                DemoOpDto::XString { edges } => {
                                    DemoOp::XString { edges: edges.clone() }
                                }
                                DemoOpDto::ZString { edges } => {
                                    DemoOp::ZString { edges: edges.clone() }
                                }
                                DemoOpDto::Comb { g, string } => DemoOp::Comb {
                                    spec: string.to_spec(&format!("{path}.string"))?,
                                    g: g.resolve(group, &format!("{path}.g"))?,
                                },
                            })
                        })
                        .collect::<Result<Vec<_>, ConfigError>>()?
                }
            };
            Job::Restricted { ctx, ops }
        }
        "elongation-check" => {
            let ctx = resolve_context(&config)?;
            let dto = parse_geometry::<ElongationGeoDto>(&config.geometry)?;
            let dto = dto.unwrap_or(ElongationGeoDto {
                string: None,
                extension: None,
                control: None,
                targets: None,
                samples: None,
            });
            let geometric = [
                dto.string.is_some(),
                dto.extension.is_some(),
                dto.control.is_some(),
                dto.targets.is_some(),
            ];
            let mut setup = if geometric.iter().all(|&x| x) {
                let (ext_edge, ext_sign) = dto.extension.as_ref().expect("checked");
                ElongationSetup {
                    string: dto.string.as_ref().expect("checked").to_spec("$.geometry.string")?,
                    extension: (*ext_edge, parse_sign(ext_sign, "$.geometry.extension")?),
                    control_edge: dto.control.expect("checked"),
                    target_edges: dto.targets.clone().expect("checked"),
                    samples: DEFAULT_SAMPLES,
                    seed,
                }
            } else if geometric.iter().any(|&x| x) {
                return Err(ConfigError::new(
                    "$.geometry",
                    "specify all of `string`, `extension`, `control`, `targets`, or none",
                ));
            } else {
                let mut s = default_elongation_setup(ctx.lattice()).map_err(geometry_error)?;
                s.seed = seed;
                s
            };
            if let Some(samples) = dto.samples {
                if samples == 0 {
                    return Err(ConfigError::new("$.geometry.samples", "must be at least 1"));
                }
                setup.samples = samples;
            }
            Job::Elongation { ctx, setup: Box::new(setup) }
        }
        "un-check" => {
            let max_n = match parse_geometry::<UnGeoDto>(&config.geometry)? {
                None => DEFAULT_MAX_N,
                Some(dto) => dto.max_n,
            };
            if !(1..=8).contains(&max_n) {
                return Err(ConfigError::new("$.geometry.max_n", "must be between 1 and 8"));
            }
            Job::Un { max_n }
        }
        "purification-check" => {
            let group = resolve_group(&config)?;
            let degree = match parse_geometry::<PurificationGeoDto>(&config.geometry)? {
                None => {
                    if group.order() == 2 {
                        4
                    } else {
                        2
                    }
                }
                Some(dto) => dto.degree,
            };
            if degree == 0 {
                return Err(ConfigError::new("$.geometry.degree", "must be at least 1"));
            }
            Job::Purification { group, degree, seed }
        }
        _ => unreachable!("experiment name validated above"),
    };

    Ok(RunPlan { job, tols, output: config.output })
}

/// Runs the resolved experiment. Errors here are geometry problems the
/// structural checks could not catch (still configuration-induced).
pub fn execute(plan: &RunPlan) -> Result<ExperimentReport, ExperimentError> {
    match &plan.job {
        Job::PrepareVerify { ctx } => prepare_verify::<f64>(ctx, plan.tols),
        Job::BraidAbelian { ctx, geometry } => abelian_braiding::<f64>(ctx, geometry, plan.tols),
        Job::BraidNonabelian { ctx, setup } => nonabelian_braiding::<f64>(ctx, setup, plan.tols),
        Job::Restricted { ctx, ops } => restricted_demo::<f64>(ctx, ops, plan.tols),
        Job::Elongation { ctx, setup } => elongation_check::<f64>(ctx, setup, plan.tols),
        Job::Un { max_n } => un_check::<f64>(*max_n, plan.tols),
        Job::Purification { group, degree, seed } => {
            purification_report::<f64>(group, *degree, *seed, plan.tols)
        }
    }
}
