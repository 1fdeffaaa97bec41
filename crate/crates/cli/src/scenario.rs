//! Scenario files: a named workload, the fabric it runs on and its seeds.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use wafermesh_core::kv_cache::KvMode;
use wafermesh_core::llm::ModelShape;
use wafermesh_core::{GridShape, PlmrConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Device parameters. `width` and `height` bound the grids of layer and
    /// autotune runs; GEMM, GEMV and KV runs replace them with their grid.
    #[serde(default)]
    pub fabric: Option<PlmrConfig>,
    /// Directory for report files; `--out` takes precedence.
    #[serde(default)]
    pub out: Option<String>,
    pub workload: Workload,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Workload {
    Gemm(GemmParams),
    Gemv(GemvParams),
    Kvcache(KvParams),
    Layer(LayerParams),
    Autotune(AutotuneParams),
}

impl Workload {
    pub fn kind(&self) -> &'static str {
        match self {
            Workload::Gemm(_) => "gemm",
            Workload::Gemv(_) => "gemv",
            Workload::Kvcache(_) => "kvcache",
            Workload::Layer(_) => "layer",
            Workload::Autotune(_) => "autotune",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GemmParams {
    pub grids: Vec<GridShape>,
    /// Elements per tile side; matrices are `side * tile` square unless `dims` is set.
    #[serde(default = "default_tile")]
    pub tile: usize,
    /// Explicit `[M, K, N]`.
    #[serde(default)]
    pub dims: Option<[usize; 3]>,
    #[serde(default = "default_gemm_algorithms")]
    pub algorithms: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GemvParams {
    pub grids: Vec<GridShape>,
    #[serde(default = "default_tile")]
    pub tile: usize,
    /// Explicit `[K, N]`.
    #[serde(default)]
    pub dims: Option<[usize; 2]>,
    #[serde(default = "default_gemv_algorithms")]
    pub algorithms: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KvParams {
    pub grid: GridShape,
    /// Chunks one core can hold.
    pub capacity: usize,
    #[serde(default = "default_chunk_bytes")]
    pub chunk_bytes: u64,
    /// Tokens to insert; defaults to what shift mode can hold.
    #[serde(default)]
    pub tokens: Option<usize>,
    #[serde(default = "default_kv_modes")]
    pub modes: Vec<KvMode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerParams {
    #[serde(default = "ModelShape::toy")]
    pub model: ModelShape,
    pub prefill_grid: GridShape,
    pub decode_grid: GridShape,
    #[serde(default = "default_decode_steps")]
    pub decode_steps: usize,
    #[serde(default = "default_kv_mode")]
    pub kv_mode: KvMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AutotuneParams {
    #[serde(default = "ModelShape::toy")]
    pub model: ModelShape,
    pub grids: Vec<GridShape>,
    pub input: usize,
    pub output: usize,
}

fn default_tile() -> usize {
    2
}
fn default_chunk_bytes() -> u64 {
    64
}
fn default_decode_steps() -> usize {
    4
}
fn default_kv_mode() -> KvMode {
    KvMode::Shift
}
fn default_kv_modes() -> Vec<KvMode> {
    vec![KvMode::Shift, KvMode::Concat]
}
fn default_gemm_algorithms() -> Vec<String> {
    ["meshgemm", "cannon", "summa", "allgather"].map(String::from).to_vec()
}
fn default_gemv_algorithms() -> Vec<String> {
    ["ktree2", "pipeline", "ring"].map(String::from).to_vec()
}

/// Parses `NxM` (width by height) or a single side `N`.
pub fn parse_grid(s: &str) -> Result<GridShape> {
    let parse = |p: &str| p.trim().parse::<usize>().with_context(|| format!("bad grid {s:?}, expected NxM"));
    let g = match s.split_once(['x', 'X']) {
        Some((w, h)) => GridShape::new(parse(w)?, parse(h)?),
        None => GridShape::square(parse(s)?),
    };
    if g.cores() == 0 {
        bail!("grid {s:?} has no cores");
    }
    Ok(g)
}

impl Scenario {
    pub fn from_toml(text: &str, origin: &str) -> Result<Self> {
        let s: Scenario = toml::from_str(text).map_err(|e| {
            let location = match e.span() {
                Some(span) => {
                    let before = &text[..span.start.min(text.len())];
                    let line = before.matches('\n').count() + 1;
                    let col = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
                    format!("{origin}:{line}:{col}")
                }
                None => origin.to_string(),
            };
            wafermesh_core::Error::Parse { location, message: e.message().to_string() }
        })?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading scenario {}", path.display()))?;
        Self::from_toml(&text, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            bail!("scenario name {:?} must be non-empty and usable as a file name", self.name);
        }
        if self.seeds.is_empty() {
            bail!("scenario {} lists no seeds", self.name);
        }
        if let Some(f) = &self.fabric {
            f.validate()?;
        }
        Ok(())
    }

    /// Device parameters with the mesh set to `grid`.
    pub fn fabric_for(&self, grid: GridShape) -> PlmrConfig {
        let base = self.fabric.clone().unwrap_or_default();
        PlmrConfig { width: grid.nx, height: grid.ny, ..base }
    }

    /// Device parameters with the mesh large enough for every listed grid.
    pub fn fabric_covering(&self, grids: &[GridShape]) -> PlmrConfig {
        let base = self.fabric.clone().unwrap_or_default();
        let nx = grids.iter().map(|g| g.nx).max().unwrap_or(1);
        let ny = grids.iter().map(|g| g.ny).max().unwrap_or(1);
        PlmrConfig { width: base.width.max(nx), height: base.height.max(ny), ..base }
    }

    /// Built-in scenario used when no config file is given.
    pub fn default_for(kind: &str) -> Result<Self> {
        let workload = match kind {
            "gemm" => Workload::Gemm(GemmParams {
                grids: vec![GridShape::square(4)],
                tile: default_tile(),
                dims: None,
                algorithms: default_gemm_algorithms(),
            }),
            "gemv" => Workload::Gemv(GemvParams {
                grids: vec![GridShape::square(4), GridShape::square(8), GridShape::square(16)],
                tile: default_tile(),
                dims: None,
                algorithms: default_gemv_algorithms(),
            }),
            "kvcache" => Workload::Kvcache(KvParams {
                grid: GridShape::square(4),
                capacity: 8,
                chunk_bytes: default_chunk_bytes(),
                tokens: None,
                modes: default_kv_modes(),
            }),
            "layer" => Workload::Layer(LayerParams {
                model: ModelShape::toy(),
                prefill_grid: GridShape::square(4),
                decode_grid: GridShape::square(4),
                decode_steps: default_decode_steps(),
                kv_mode: default_kv_mode(),
            }),
            "autotune" => Workload::Autotune(AutotuneParams {
                model: ModelShape::toy(),
                grids: vec![GridShape::square(2), GridShape::square(4), GridShape::square(8)],
                input: 8,
                output: 4,
            }),
            other => bail!("no built-in scenario for {other:?}"),
        };
        Ok(Self { name: kind.to_string(), seeds: default_seeds(), fabric: None, out: None, workload })
    }

    /// Applies `--grid`, `--algo` and `--seed`.
    pub fn override_with(&mut self, grid: Option<GridShape>, algos: Option<Vec<String>>, seed: Option<u64>) -> Result<()> {
        if let Some(seed) = seed {
            self.seeds = vec![seed];
        }
        match &mut self.workload {
            Workload::Gemm(p) => {
                if let Some(g) = grid {
                    p.grids = vec![g];
                }
                if let Some(a) = algos {
                    p.algorithms = a;
                }
            }
            Workload::Gemv(p) => {
                if let Some(g) = grid {
                    p.grids = vec![g];
                }
                if let Some(a) = algos {
                    p.algorithms = a;
                }
            }
            Workload::Kvcache(p) => {
                if let Some(g) = grid {
                    p.grid = g;
                }
                if let Some(a) = algos {
                    p.modes = a.iter().map(|m| m.parse()).collect::<wafermesh_core::Result<_>>()?;
                }
            }
            Workload::Layer(p) => {
                if let Some(g) = grid {
                    p.prefill_grid = g;
                    p.decode_grid = g;
                }
                if algos.is_some() {
                    bail!("--algo does not apply to layer runs");
                }
            }
            Workload::Autotune(p) => {
                if let Some(g) = grid {
                    p.grids = vec![g];
                }
                if algos.is_some() {
                    bail!("--algo does not apply to autotune runs");
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_notation() {
        assert_eq!(parse_grid("8x4").unwrap(), GridShape::new(8, 4));
        assert_eq!(parse_grid("5").unwrap(), GridShape::square(5));
        assert!(parse_grid("0x3").is_err());
        assert!(parse_grid("ax3").is_err());
    }

    #[test]
    fn parses_gemm_scenario() {
        let s = Scenario::from_toml(
            r#"
name = "small"
seeds = [1, 2]

[fabric]
width = 8
height = 8
beta = 5

[workload]
kind = "gemm"
grids = [{ nx = 4, ny = 4 }]
algorithms = ["meshgemm", "cannon"]
"#,
            "small.toml",
        )
        .unwrap();
        assert_eq!(s.seeds, [1, 2]);
        assert_eq!(s.fabric_for(GridShape::square(4)).beta, 5);
        assert_eq!(s.workload.kind(), "gemm");
    }

    #[test]
    fn parse_error_has_location() {
        let err = Scenario::from_toml("name = \"x\"\n[workload]\nkind = \"gemm\"\ngrids = 3\n", "bad.toml").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("bad.toml:2:"), "{msg}");
    }

    #[test]
    fn defaults_round_trip() {
        for kind in ["gemm", "gemv", "kvcache", "layer", "autotune"] {
            let s = Scenario::default_for(kind).unwrap();
            let text = toml::to_string(&s).unwrap();
            assert_eq!(Scenario::from_toml(&text, "rt").unwrap(), s);
        }
    }
}
