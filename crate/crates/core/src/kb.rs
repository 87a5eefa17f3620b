//! The module bank: every trained seed cut into its cells, weights frozen,
//! indexed by (depth, source architecture).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io::{load_tensors, save_tensors};
use crate::network::{Network, Op};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::zoo::{build_cell, CellKind, SeedNetwork};

pub const KB_MANIFEST: &str = "kb_manifest.txt";
pub const KB_WEIGHTS: &str = "kb_weights.mnt";

/// Structural identity of one module, everything needed to rebuild its op
/// sequence before loading weights into it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellDesc {
    pub kind: CellKind,
    pub in_ch: usize,
    pub out_ch: usize,
}

#[derive(Debug, Clone)]
pub struct ModuleRecord<S: Scalar = f32> {
    /// 0-based depth position.
    pub depth: usize,
    /// 0-based source-architecture index.
    pub arch: usize,
    pub seed_name: String,
    pub desc: CellDesc,
    /// The cell's ops with trained, frozen weights.
    pub ops: Vec<Op<S>>,
}

impl<S: Scalar> ModuleRecord<S> {
    /// Fresh clones of the ops, still frozen, for assembling candidates.
    pub fn cloned_ops(&self) -> Vec<Op<S>> {
        self.ops.clone()
    }
}

#[derive(Debug, Clone)]
pub struct KnowledgeBase<S: Scalar = f32> {
    pub c: usize,
    pub n: usize,
    pub in_ch: usize,
    pub image_hw: usize,
    pub num_classes: usize,
    pub seed_names: Vec<String>,
    /// Indexed [depth][arch].
    modules: Vec<Vec<ModuleRecord<S>>>,
}

impl<S: Scalar> KnowledgeBase<S> {
    /// Cuts each trained seed at its cell boundaries. Heads are dropped;
    /// the stored module weights are frozen.
    pub fn decompose(seeds: &[SeedNetwork<S>]) -> Result<Self> {
        if seeds.is_empty() {
            return Err(Error::Kb("no seed networks to decompose".into()));
        }
        let c = seeds[0].cells.len();
        let (in_ch, image_hw, num_classes) =
            (seeds[0].in_ch, seeds[0].image_hw, seeds[0].num_classes);
        for s in seeds {
            if s.cells.len() != c || s.in_ch != in_ch || s.image_hw != image_hw
                || s.num_classes != num_classes
            {
                return Err(Error::Kb(format!(
                    "seed {} disagrees on depth or input geometry",
                    s.spec.name
                )));
            }
        }
        let mut modules: Vec<Vec<ModuleRecord<S>>> = (0..c).map(|_| Vec::new()).collect();
        for (arch, seed) in seeds.iter().enumerate() {
            for (depth, range) in seed.cells.iter().enumerate() {
                let mut ops: Vec<Op<S>> = seed.net.ops[range.clone()].to_vec();
                for op in &mut ops {
                    op.set_frozen(true);
                }
                let desc = CellDesc {
                    kind: seed.spec.kind.clone(),
                    in_ch: if depth == 0 { in_ch } else { seed.spec.widths[depth - 1] },
                    out_ch: seed.spec.widths[depth],
                };
                modules[depth].push(ModuleRecord {
                    depth,
                    arch,
                    seed_name: seed.spec.name.clone(),
                    desc,
                    ops,
                });
            }
        }
        let kb = Self {
            c,
            n: seeds.len(),
            in_ch,
            image_hw,
            num_classes,
            seed_names: seeds.iter().map(|s| s.spec.name.clone()).collect(),
            modules,
        };
        kb.validate()?;
        Ok(kb)
    }

    /// Module at `depth` (0-based) for 1-based gene value.
    pub fn module(&self, depth: usize, gene: usize) -> Result<&ModuleRecord<S>> {
        if depth >= self.c {
            return Err(Error::Kb(format!("depth {depth} out of range for c={}", self.c)));
        }
        if gene == 0 || gene > self.n {
            return Err(Error::Kb(format!("gene {gene} out of range [1, {}]", self.n)));
        }
        Ok(&self.modules[depth][gene - 1])
    }

    /// Spatial size the head sees: c halvings of the input image.
    pub fn head_in_hw(&self) -> usize {
        self.image_hw >> self.c
    }

    /// Grid completeness, channel-chain consistency per column, and
    /// structural rebuildability of every record.
    pub fn validate(&self) -> Result<()> {
        if self.modules.len() != self.c || self.seed_names.len() != self.n {
            return Err(Error::Kb("module grid does not match declared (c, n)".into()));
        }
        for (depth, row) in self.modules.iter().enumerate() {
            if row.len() != self.n {
                return Err(Error::Kb(format!(
                    "depth {depth} has {} modules, expected {}",
                    row.len(),
                    self.n
                )));
            }
            for (arch, m) in row.iter().enumerate() {
                if m.depth != depth || m.arch != arch {
                    return Err(Error::Kb(format!(
                        "module at [{depth}][{arch}] is labeled ({}, {})",
                        m.depth, m.arch
                    )));
                }
                if depth == 0 && m.desc.in_ch != self.in_ch {
                    return Err(Error::Kb(format!(
                        "first module of {} expects {} input channels, dataset has {}",
                        m.seed_name, m.desc.in_ch, self.in_ch
                    )));
                }
                if depth > 0 {
                    let below = &self.modules[depth - 1][arch];
                    if below.desc.out_ch != m.desc.in_ch {
                        return Err(Error::Kb(format!(
                            "channel chain broken in {} between depths {} and {depth}",
                            m.seed_name,
                            depth - 1
                        )));
                    }
                }
                // Rebuild structurally and compare tensor names/dims; this is
                // exactly what load() will do, so it proves round-trip
                // viability.
                let rebuilt = build_cell::<S>(
                    &m.desc.kind,
                    m.desc.in_ch,
                    m.desc.out_ch,
                    &mut ChaCha8Rng::seed_from_u64(0),
                )?;
                let have = tensor_sig(&m.ops);
                let want = tensor_sig(&rebuilt);
                if have != want {
                    return Err(Error::Kb(format!(
                        "module ({depth}, {arch}) does not match its structural description"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Stable 64-bit digest over every stored weight bit, for freeze
    /// checks.
    pub fn weight_fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |b: u64| {
            h ^= b;
            h = h.wrapping_mul(0x100_0000_01b3);
        };
        for row in &self.modules {
            for m in row {
                for op in &m.ops {
                    for (_, t) in op.tensors() {
                        for v in t.data() {
                            eat(v.to_f64_lossy().to_bits());
                        }
                    }
                }
            }
        }
        h
    }
}

fn tensor_sig<S: Scalar>(ops: &[Op<S>]) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    for (i, op) in ops.iter().enumerate() {
        for (name, t) in op.tensors() {
            out.push((format!("op{i:03}.{name}"), t.dims().to_vec()));
        }
    }
    out
}

fn kind_token(kind: &CellKind) -> String {
    match kind {
        CellKind::Plain { convs } => format!("plain convs={convs}"),
        CellKind::Residual { blocks } => format!("residual blocks={blocks}"),
    }
}

fn parse_kind(tokens: &[&str]) -> Result<CellKind> {
    let bad = || Error::Kb(format!("bad cell kind tokens {tokens:?}"));
    match tokens {
        ["plain", arg] => {
            let convs = arg.strip_prefix("convs=").ok_or_else(bad)?;
            Ok(CellKind::Plain { convs: convs.parse().map_err(|_| bad())? })
        }
        ["residual", arg] => {
            let blocks = arg.strip_prefix("blocks=").ok_or_else(bad)?;
            Ok(CellKind::Residual { blocks: blocks.parse().map_err(|_| bad())? })
        }
        _ => Err(bad()),
    }
}

impl KnowledgeBase<f32> {
    /// Writes `kb_manifest.txt` (structure) and `kb_weights.mnt` (tensors)
    /// into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut manifest = String::new();
        writeln!(manifest, "version 1").expect("string write");
        writeln!(manifest, "c {}", self.c).expect("string write");
        writeln!(manifest, "n {}", self.n).expect("string write");
        writeln!(manifest, "in_ch {}", self.in_ch).expect("string write");
        writeln!(manifest, "image_hw {}", self.image_hw).expect("string write");
        writeln!(manifest, "num_classes {}", self.num_classes).expect("string write");
        for (i, name) in self.seed_names.iter().enumerate() {
            writeln!(manifest, "seed {i} {name}").expect("string write");
        }
        let mut tensors: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
        for row in &self.modules {
            for m in row {
                writeln!(
                    manifest,
                    "module {} {} {} in={} out={}",
                    m.depth,
                    m.arch,
                    kind_token(&m.desc.kind),
                    m.desc.in_ch,
                    m.desc.out_ch
                )
                .expect("string write");
                for (i, op) in m.ops.iter().enumerate() {
                    for (name, t) in op.tensors() {
                        tensors.insert(
                            format!("d{}_a{}.op{i:03}.{name}", m.depth, m.arch),
                            t.clone(),
                        );
                    }
                }
            }
        }
        fs::write(dir.join(KB_MANIFEST), manifest)?;
        save_tensors(&dir.join(KB_WEIGHTS), &tensors)
    }

    /// Rebuilds every module from the manifest and loads its weights.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(KB_MANIFEST);
        let text = fs::read_to_string(&manifest_path).map_err(|e| {
            Error::Kb(format!("cannot read {}: {e}", manifest_path.display()))
        })?;
        let mut version = None;
        let mut c = None;
        let mut n = None;
        let mut in_ch = None;
        let mut image_hw = None;
        let mut num_classes = None;
        let mut seed_names: BTreeMap<usize, String> = BTreeMap::new();
        let mut descs: BTreeMap<(usize, usize), CellDesc> = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let tokens: Vec<&str> = line.split_whitespace().collect();
            let ctx = |what: &str| Error::Kb(format!("manifest line {}: {what}", lineno + 1));
            match tokens[0] {
                "version" => {
                    if tokens.get(1) != Some(&"1") {
                        return Err(ctx("unsupported version"));
                    }
                    version = Some(1);
                }
                "c" => c = Some(parse_count(&tokens, 1).map_err(|e| ctx(&e))?),
                "n" => n = Some(parse_count(&tokens, 1).map_err(|e| ctx(&e))?),
                "in_ch" => in_ch = Some(parse_count(&tokens, 1).map_err(|e| ctx(&e))?),
                "image_hw" => image_hw = Some(parse_count(&tokens, 1).map_err(|e| ctx(&e))?),
                "num_classes" => {
                    num_classes = Some(parse_count(&tokens, 1).map_err(|e| ctx(&e))?)
                }
                "seed" => {
                    let idx = parse_count(&tokens, 1).map_err(|e| ctx(&e))?;
                    let name = tokens.get(2).ok_or_else(|| ctx("missing seed name"))?;
                    seed_names.insert(idx, name.to_string());
                }
                "module" => {
                    if tokens.len() < 6 {
                        return Err(ctx("module line too short"));
                    }
                    let depth = parse_count(&tokens, 1).map_err(|e| ctx(&e))?;
                    let arch = parse_count(&tokens, 2).map_err(|e| ctx(&e))?;
                    let kind = parse_kind(&tokens[3..tokens.len() - 2])?;
                    let in_tok = tokens[tokens.len() - 2]
                        .strip_prefix("in=")
                        .ok_or_else(|| ctx("missing in= field"))?;
                    let out_tok = tokens[tokens.len() - 1]
                        .strip_prefix("out=")
                        .ok_or_else(|| ctx("missing out= field"))?;
                    let desc = CellDesc {
                        kind,
                        in_ch: in_tok.parse().map_err(|_| ctx("bad in= value"))?,
                        out_ch: out_tok.parse().map_err(|_| ctx("bad out= value"))?,
                    };
                    descs.insert((depth, arch), desc);
                }
                other => return Err(ctx(&format!("unknown directive {other:?}"))),
            }
        }
        version.ok_or_else(|| Error::Kb("manifest missing version line".into()))?;
        let c = c.ok_or_else(|| Error::Kb("manifest missing c".into()))?;
        let n = n.ok_or_else(|| Error::Kb("manifest missing n".into()))?;
        let in_ch = in_ch.ok_or_else(|| Error::Kb("manifest missing in_ch".into()))?;
        let image_hw = image_hw.ok_or_else(|| Error::Kb("manifest missing image_hw".into()))?;
        let num_classes =
            num_classes.ok_or_else(|| Error::Kb("manifest missing num_classes".into()))?;
        let seed_names: Vec<String> = (0..n)
            .map(|i| {
                seed_names
                    .get(&i)
                    .cloned()
                    .ok_or_else(|| Error::Kb(format!("manifest missing seed {i}")))
            })
            .collect::<Result<_>>()?;

        let mut all = load_tensors(&dir.join(KB_WEIGHTS))?;
        let mut modules: Vec<Vec<ModuleRecord<f32>>> = (0..c).map(|_| Vec::new()).collect();
        for depth in 0..c {
            for arch in 0..n {
                let desc = descs.remove(&(depth, arch)).ok_or_else(|| {
                    Error::Kb(format!("manifest missing module ({depth}, {arch})"))
                })?;
                let ops = build_cell::<f32>(
                    &desc.kind,
                    desc.in_ch,
                    desc.out_ch,
                    &mut ChaCha8Rng::seed_from_u64(0),
                )?;
                let prefix = format!("d{depth}_a{arch}.");
                let keys: Vec<String> =
                    all.range(prefix.clone()..).take_while(|(k, _)| k.starts_with(&prefix))
                        .map(|(k, _)| k.clone())
                        .collect();
                let mut state = BTreeMap::new();
                for k in keys {
                    let t = all.remove(&k).expect("key listed from the map");
                    state.insert(k[prefix.len()..].to_string(), t);
                }
                let mut net = Network::new(ops);
                net.load_state_dict(state).map_err(|e| {
                    Error::Kb(format!("module ({depth}, {arch}): {e}"))
                })?;
                let mut ops = net.ops;
                for op in &mut ops {
                    op.set_frozen(true);
                }
                modules[depth].push(ModuleRecord {
                    depth,
                    arch,
                    seed_name: seed_names[arch].clone(),
                    desc,
                    ops,
                });
            }
        }
        if !descs.is_empty() {
            return Err(Error::Kb(format!(
                "manifest lists modules outside the {c}x{n} grid: {:?}",
                descs.keys().collect::<Vec<_>>()
            )));
        }
        if let Some((k, _)) = all.into_iter().next() {
            return Err(Error::Kb(format!("weights file has unclaimed tensor {k:?}")));
        }
        let kb = Self {
            c,
            n,
            in_ch,
            image_hw,
            num_classes,
            seed_names,
            modules,
        };
        kb.validate()?;
        Ok(kb)
    }
}

fn parse_count(tokens: &[&str], idx: usize) -> std::result::Result<usize, String> {
    tokens
        .get(idx)
        .ok_or_else(|| "missing field".to_string())?
        .parse()
        .map_err(|_| format!("bad count {:?}", tokens.get(idx)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zoo::{build_seed, default_seed_specs};

    fn tiny_kb() -> KnowledgeBase<f32> {
        let specs = default_seed_specs(2);
        let seeds: Vec<SeedNetwork<f32>> = specs
            .iter()
            .enumerate()
            .map(|(i, s)| build_seed(s, 3, 8, 3, 100 + i as u64).unwrap())
            .collect();
        KnowledgeBase::decompose(&seeds).unwrap()
    }

    #[test]
    fn decompose_builds_full_grid() {
        let kb = tiny_kb();
        assert_eq!((kb.c, kb.n), (2, 4));
        for depth in 0..kb.c {
            for gene in 1..=kb.n {
                let m = kb.module(depth, gene).unwrap();
                assert_eq!(m.depth, depth);
                assert_eq!(m.arch, gene - 1);
            }
        }
        assert!(kb.module(0, 0).is_err());
        assert!(kb.module(0, 5).is_err());
        assert!(kb.module(2, 1).is_err());
        assert_eq!(kb.head_in_hw(), 2);
    }

    #[test]
    fn save_load_round_trips_bitwise() {
        let kb = tiny_kb();
        let dir = tempfile::tempdir().unwrap();
        kb.save(dir.path()).unwrap();
        let back = KnowledgeBase::load(dir.path()).unwrap();
        assert_eq!(back.c, kb.c);
        assert_eq!(back.n, kb.n);
        assert_eq!(back.seed_names, kb.seed_names);
        assert_eq!(back.weight_fingerprint(), kb.weight_fingerprint());
        for depth in 0..kb.c {
            for gene in 1..=kb.n {
                let (a, b) = (kb.module(depth, gene).unwrap(), back.module(depth, gene).unwrap());
                assert_eq!(a.desc, b.desc);
                let (sa, sb) = (tensor_sig(&a.ops), tensor_sig(&b.ops));
                assert_eq!(sa, sb);
                for (x, y) in a.ops.iter().zip(&b.ops) {
                    for ((_, tx), (_, ty)) in x.tensors().iter().zip(y.tensors()) {
                        let bits_x: Vec<u32> = tx.data().iter().map(|v| v.to_bits()).collect();
                        let bits_y: Vec<u32> = ty.data().iter().map(|v| v.to_bits()).collect();
                        assert_eq!(bits_x, bits_y);
                    }
                }
            }
        }
    }

    #[test]
    fn load_rejects_tampered_artifacts() {
        let kb = tiny_kb();
        let dir = tempfile::tempdir().unwrap();
        kb.save(dir.path()).unwrap();

        let manifest = fs::read_to_string(dir.path().join(KB_MANIFEST)).unwrap();
        fs::write(dir.path().join(KB_MANIFEST), manifest.replace("version 1", "version 2"))
            .unwrap();
        assert!(KnowledgeBase::load(dir.path()).is_err());

        fs::write(dir.path().join(KB_MANIFEST), manifest.lines().skip(1).collect::<Vec<_>>().join("\n"))
            .unwrap();
        assert!(KnowledgeBase::load(dir.path()).is_err());
    }

    #[test]
    fn loaded_modules_are_frozen() {
        let kb = tiny_kb();
        let dir = tempfile::tempdir().unwrap();
        kb.save(dir.path()).unwrap();
        let mut back = KnowledgeBase::load(dir.path()).unwrap();
        for row in &mut back.modules {
            for m in row {
                for op in &mut m.ops {
                    for p in op.params_mut() {
                        assert!(p.frozen);
                    }
                }
            }
        }
    }
}
