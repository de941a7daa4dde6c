//! Tree and forest topology: node layouts, leaf routing and the SFF1 file
//! format.
//!
//! A [`TreeShape`] is a complete partition tree in preorder. BSP nodes split
//! a region in two along an SDF boundary, quad nodes split it into four
//! quadrants around a point. Leaves are numbered by preorder appearance, so
//! the leaves below any child slot form a contiguous range.

use std::fmt::Write as _;
use std::ops::Range;

use crate::error::{Error, Result};
use crate::sdf::SdfKind;

/// One node of a partition tree, in preorder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TreeNode {
    /// Binary split along the zero set of an SDF.
    Bsp(SdfKind),
    /// Four-way split around a learned point (2 parameters).
    Quad,
    Leaf,
}

impl TreeNode {
    pub fn arity(self) -> usize {
        match self {
            TreeNode::Bsp(_) => 2,
            TreeNode::Quad => 4,
            TreeNode::Leaf => 0,
        }
    }

    pub fn parameter_count(self) -> usize {
        match self {
            TreeNode::Bsp(kind) => kind.parameter_count(),
            TreeNode::Quad => 2,
            TreeNode::Leaf => 0,
        }
    }
}

#[derive(Clone, Debug)]
struct NodeMeta {
    /// Child node indices (2 or 4 entries for inner nodes, empty for leaves).
    children: Vec<u32>,
    /// Leaf index range below each child slot.
    child_leaves: Vec<Range<u32>>,
    /// Offset of this node's parameters in the packed inner-parameter vector.
    param_offset: u32,
    /// Leaf index if this node is a leaf.
    leaf_index: Option<u32>,
}

/// A complete partition tree.
#[derive(Clone, Debug)]
pub struct TreeShape {
    nodes: Vec<TreeNode>,
    meta: Vec<NodeMeta>,
    leaf_count: usize,
    depth: usize,
    inner_param_count: usize,
    /// Preorder indices of the inner nodes.
    inner_nodes: Vec<u32>,
}

impl PartialEq for TreeShape {
    fn eq(&self, other: &Self) -> bool {
        self.nodes == other.nodes
    }
}

impl TreeShape {
    /// Build a shape from a preorder node list, verifying completeness.
    pub fn from_nodes(nodes: Vec<TreeNode>) -> Result<TreeShape> {
        if nodes.is_empty() {
            return Err(Error::contract("tree has no nodes"));
        }
        let mut meta: Vec<NodeMeta> = nodes
            .iter()
            .map(|_| NodeMeta {
                children: Vec::new(),
                child_leaves: Vec::new(),
                param_offset: 0,
                leaf_index: None,
            })
            .collect();
        let mut leaf_count = 0u32;
        let mut param_offset = 0u32;
        // Returns (next preorder position, subtree depth, subtree leaf range).
        fn build(
            nodes: &[TreeNode],
            meta: &mut [NodeMeta],
            pos: usize,
            leaf_count: &mut u32,
            param_offset: &mut u32,
        ) -> Result<(usize, usize, Range<u32>)> {
            let node = *nodes
                .get(pos)
                .ok_or_else(|| Error::contract("preorder node list ends inside a subtree"))?;
            meta[pos].param_offset = *param_offset;
            *param_offset += node.parameter_count() as u32;
            if node == TreeNode::Leaf {
                let leaf = *leaf_count;
                *leaf_count += 1;
                meta[pos].leaf_index = Some(leaf);
                return Ok((pos + 1, 0, leaf..leaf + 1));
            }
            let mut next = pos + 1;
            let mut depth = 0usize;
            let first_leaf = *leaf_count;
            for _slot in 0..node.arity() {
                let child = next as u32;
                let (after, child_depth, child_range) =
                    build(nodes, meta, next, leaf_count, param_offset)?;
                meta[pos].children.push(child);
                meta[pos].child_leaves.push(child_range);
                next = after;
                depth = depth.max(child_depth + 1);
            }
            Ok((next, depth, first_leaf..*leaf_count))
        }
        let (consumed, depth, _) = build(&nodes, &mut meta, 0, &mut leaf_count, &mut param_offset)?;
        if consumed != nodes.len() {
            return Err(Error::contract(format!(
                "tree ends at node {consumed} but {} nodes were given",
                nodes.len()
            )));
        }
        let inner_nodes = nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| **n != TreeNode::Leaf)
            .map(|(i, _)| i as u32)
            .collect();
        Ok(TreeShape {
            nodes,
            meta,
            leaf_count: leaf_count as usize,
            depth,
            inner_param_count: param_offset as usize,
            inner_nodes,
        })
    }

    /// Complete BSP tree of the given depth with one SDF family throughout.
    /// Depth 0 is a single leaf.
    pub fn bsp(kind: SdfKind, depth: usize) -> TreeShape {
        fn emit(nodes: &mut Vec<TreeNode>, kind: SdfKind, depth: usize) {
            if depth == 0 {
                nodes.push(TreeNode::Leaf);
            } else {
                nodes.push(TreeNode::Bsp(kind));
                emit(nodes, kind, depth - 1);
                emit(nodes, kind, depth - 1);
            }
        }
        let mut nodes = Vec::new();
        emit(&mut nodes, kind, depth);
        TreeShape::from_nodes(nodes).expect("complete bsp tree is well-formed")
    }

    /// Complete k-d tree: axis-threshold splits alternating X, Y, X, ... by
    /// level.
    pub fn kd(depth: usize) -> TreeShape {
        use crate::sdf::Axis;
        fn emit(nodes: &mut Vec<TreeNode>, level: usize, depth: usize) {
            if depth == 0 {
                nodes.push(TreeNode::Leaf);
            } else {
                let axis = if level % 2 == 0 { Axis::X } else { Axis::Y };
                nodes.push(TreeNode::Bsp(SdfKind::KdAxis(axis)));
                emit(nodes, level + 1, depth - 1);
                emit(nodes, level + 1, depth - 1);
            }
        }
        let mut nodes = Vec::new();
        emit(&mut nodes, 0, depth);
        TreeShape::from_nodes(nodes).expect("complete kd tree is well-formed")
    }

    /// Complete quadtree of the given depth.
    pub fn quad(depth: usize) -> TreeShape {
        fn emit(nodes: &mut Vec<TreeNode>, depth: usize) {
            if depth == 0 {
                nodes.push(TreeNode::Leaf);
            } else {
                nodes.push(TreeNode::Quad);
                for _ in 0..4 {
                    emit(nodes, depth - 1);
                }
            }
        }
        let mut nodes = Vec::new();
        emit(&mut nodes, depth);
        TreeShape::from_nodes(nodes).expect("complete quadtree is well-formed")
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn leaf_count(&self) -> usize {
        self.leaf_count
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    /// Total number of packed inner-node parameters.
    pub fn inner_param_count(&self) -> usize {
        self.inner_param_count
    }

    /// Preorder indices of the inner nodes.
    pub fn inner_nodes(&self) -> &[u32] {
        &self.inner_nodes
    }

    /// Range of this node's parameters inside the packed vector.
    pub fn param_range(&self, node: usize) -> Range<usize> {
        let start = self.meta[node].param_offset as usize;
        start..start + self.nodes[node].parameter_count()
    }

    /// Child node index of `inner` at `slot`. Panics on a leaf or an
    /// out-of-range slot.
    pub fn child(&self, inner: usize, slot: usize) -> usize {
        self.meta[inner].children[slot] as usize
    }

    /// Leaf index of a leaf node. Panics if `node` is an inner node.
    pub fn leaf_index(&self, node: usize) -> usize {
        self.meta[node]
            .leaf_index
            .expect("leaf_index called on an inner node") as usize
    }

    /// Leaf indices reachable below `child_slot` of inner node `inner`.
    ///
    /// Leaves are numbered in preorder, so the set is a contiguous range.
    pub fn leaves_under(&self, inner: usize, child_slot: usize) -> Result<Range<usize>> {
        let node = self
            .nodes
            .get(inner)
            .ok_or_else(|| Error::contract(format!("node index {inner} out of range")))?;
        if *node == TreeNode::Leaf {
            return Err(Error::contract(format!("node {inner} is a leaf")));
        }
        if child_slot >= node.arity() {
            return Err(Error::contract(format!(
                "child slot {child_slot} out of range for arity {}",
                node.arity()
            )));
        }
        let r = &self.meta[inner].child_leaves[child_slot];
        Ok(r.start as usize..r.end as usize)
    }
}

/// One member of the class partition with its own tree.
#[derive(Clone, Debug, PartialEq)]
pub struct Subset {
    /// Class indices handled by this tree, in ascending order.
    pub classes: Vec<usize>,
    pub tree: TreeShape,
}

/// Static description of a forest: block size, class partition and the tree
/// predicted per block for each subset.
#[derive(Clone, Debug, PartialEq)]
pub struct ForestSpec {
    pub block_size: usize,
    pub class_count: usize,
    pub subsets: Vec<Subset>,
}

impl ForestSpec {
    pub fn new(block_size: usize, class_count: usize, subsets: Vec<Subset>) -> Result<ForestSpec> {
        if block_size == 0 {
            return Err(Error::contract("block_size must be >= 1"));
        }
        if class_count == 0 {
            return Err(Error::contract("class_count must be >= 1"));
        }
        if subsets.is_empty() {
            return Err(Error::contract("at least one class subset is required"));
        }
        let mut seen = vec![false; class_count];
        for (j, subset) in subsets.iter().enumerate() {
            if subset.classes.is_empty() {
                return Err(Error::contract(format!("subset {j} is empty")));
            }
            for &c in &subset.classes {
                if c >= class_count {
                    return Err(Error::contract(format!(
                        "subset {j} references class {c} >= class_count {class_count}"
                    )));
                }
                if seen[c] {
                    return Err(Error::contract(format!(
                        "class {c} appears in more than one subset"
                    )));
                }
                seen[c] = true;
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::contract(format!(
                "class {missing} is not covered by any subset"
            )));
        }
        Ok(ForestSpec {
            block_size,
            class_count,
            subsets,
        })
    }

    /// One subset holding every class.
    pub fn single(block_size: usize, class_count: usize, tree: TreeShape) -> Result<ForestSpec> {
        ForestSpec::new(
            block_size,
            class_count,
            vec![Subset {
                classes: (0..class_count).collect(),
                tree,
            }],
        )
    }

    /// One singleton subset per class, all sharing the same tree shape.
    pub fn per_class(block_size: usize, class_count: usize, tree: TreeShape) -> Result<ForestSpec> {
        ForestSpec::new(
            block_size,
            class_count,
            (0..class_count)
                .map(|c| Subset {
                    classes: vec![c],
                    tree: tree.clone(),
                })
                .collect(),
        )
    }

    /// The paper-default spec: 8x8 blocks, a single subset over all classes,
    /// line-BSP of depth 2.
    pub fn default_bsp(class_count: usize) -> ForestSpec {
        ForestSpec::single(8, class_count, TreeShape::bsp(SdfKind::Line, 2))
            .expect("default spec is valid")
    }

    pub fn param_layout(&self) -> Layout {
        let subsets = self
            .subsets
            .iter()
            .map(|s| SubsetLayout {
                shape_params: s.tree.inner_param_count(),
                content_params: s.tree.leaf_count() * s.classes.len(),
                leaf_count: s.tree.leaf_count(),
                class_count: s.classes.len(),
            })
            .collect::<Vec<_>>();
        Layout {
            shape_total: subsets.iter().map(|s| s.shape_params).sum(),
            content_total: subsets.iter().map(|s| s.content_params).sum(),
            subsets,
        }
    }
}

/// Per-subset parameter counts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubsetLayout {
    pub shape_params: usize,
    pub content_params: usize,
    pub leaf_count: usize,
    pub class_count: usize,
}

/// Deterministic parameter layout of one block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub subsets: Vec<SubsetLayout>,
    pub shape_total: usize,
    pub content_total: usize,
}

impl Layout {
    pub fn total(&self) -> usize {
        self.shape_total + self.content_total
    }
}

/// Learnable parameters of one subset's tree in one block.
#[derive(Clone, Debug, PartialEq)]
pub struct SubsetParams {
    /// Inner-node parameters, packed in preorder.
    pub inner: Vec<f64>,
    /// Leaf class logits, row-major `leaf_count x subset_classes`.
    pub leaf_logits: Vec<f64>,
}

/// All learnable parameters of one block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub subsets: Vec<SubsetParams>,
}

impl BlockParams {
    pub fn zeros(spec: &ForestSpec) -> BlockParams {
        BlockParams {
            subsets: spec
                .subsets
                .iter()
                .map(|s| SubsetParams {
                    inner: vec![0.0; s.tree.inner_param_count()],
                    leaf_logits: vec![0.0; s.tree.leaf_count() * s.classes.len()],
                })
                .collect(),
        }
    }

    pub fn validate(&self, spec: &ForestSpec) -> Result<()> {
        if self.subsets.len() != spec.subsets.len() {
            return Err(Error::contract(format!(
                "block has {} subsets, spec has {}",
                self.subsets.len(),
                spec.subsets.len()
            )));
        }
        for (j, (params, subset)) in self.subsets.iter().zip(&spec.subsets).enumerate() {
            if params.inner.len() != subset.tree.inner_param_count() {
                return Err(Error::contract(format!(
                    "subset {j}: {} inner params, expected {}",
                    params.inner.len(),
                    subset.tree.inner_param_count()
                )));
            }
            let want = subset.tree.leaf_count() * subset.classes.len();
            if params.leaf_logits.len() != want {
                return Err(Error::contract(format!(
                    "subset {j}: {} leaf logits, expected {want}",
                    params.leaf_logits.len()
                )));
            }
        }
        Ok(())
    }

    /// Flatten to one vector: per subset, inner params then leaf logits.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for s in &self.subsets {
            out.extend_from_slice(&s.inner);
            out.extend_from_slice(&s.leaf_logits);
        }
        out
    }

    /// Inverse of [`BlockParams::flatten`].
    pub fn unflatten(spec: &ForestSpec, flat: &[f64]) -> Result<BlockParams> {
        let mut pos = 0usize;
        let mut subsets = Vec::with_capacity(spec.subsets.len());
        for s in &spec.subsets {
            let ni = s.tree.inner_param_count();
            let nl = s.tree.leaf_count() * s.classes.len();
            if pos + ni + nl > flat.len() {
                return Err(Error::contract("flat parameter vector too short"));
            }
            subsets.push(SubsetParams {
                inner: flat[pos..pos + ni].to_vec(),
                leaf_logits: flat[pos + ni..pos + ni + nl].to_vec(),
            });
            pos += ni + nl;
        }
        if pos != flat.len() {
            return Err(Error::contract("flat parameter vector too long"));
        }
        Ok(BlockParams { subsets })
    }
}

/// A fitted forest: the spec plus one [`BlockParams`] per grid cell.
#[derive(Clone, Debug)]
pub struct ForestModel {
    pub spec: ForestSpec,
    pub grid_width: usize,
    pub grid_height: usize,
    /// Row-major block grid.
    pub blocks: Vec<BlockParams>,
    pub class_names: Option<Vec<String>>,
}

impl ForestModel {
    pub fn new(
        spec: ForestSpec,
        grid_width: usize,
        grid_height: usize,
        blocks: Vec<BlockParams>,
    ) -> Result<ForestModel> {
        if blocks.len() != grid_width * grid_height {
            return Err(Error::contract(format!(
                "{} blocks for a {grid_width}x{grid_height} grid",
                blocks.len()
            )));
        }
        for b in &blocks {
            b.validate(&spec)?;
        }
        Ok(ForestModel {
            spec,
            grid_width,
            grid_height,
            blocks,
            class_names: None,
        })
    }

    pub fn block(&self, bx: usize, by: usize) -> &BlockParams {
        &self.blocks[by * self.grid_width + bx]
    }

    /// Rendered mask dimensions at integer scale 1.
    pub fn native_size(&self) -> (usize, usize) {
        (
            self.grid_width * self.spec.block_size,
            self.grid_height * self.spec.block_size,
        )
    }
}

// --- SFF1 text format -------------------------------------------------

fn node_code(node: TreeNode) -> String {
    match node {
        TreeNode::Quad => "Q".to_string(),
        TreeNode::Bsp(kind) => format!("B{}", kind.code()),
        TreeNode::Leaf => "L".to_string(),
    }
}

fn parse_tree_codes(text: &str, line_no: usize) -> Result<TreeShape> {
    let mut nodes = Vec::new();
    let mut chars = text.chars().filter(|c| !c.is_whitespace());
    while let Some(c) = chars.next() {
        match c {
            'Q' => nodes.push(TreeNode::Quad),
            'L' => nodes.push(TreeNode::Leaf),
            'B' => {
                let code = chars.next().ok_or_else(|| {
                    Error::parse(format!("line {line_no}: 'B' without an SDF code"))
                })?;
                let kind = SdfKind::from_code(code).ok_or_else(|| {
                    Error::parse(format!("line {line_no}: unknown node code 'B{code}'"))
                })?;
                nodes.push(TreeNode::Bsp(kind));
            }
            other => {
                return Err(Error::parse(format!(
                    "line {line_no}: unknown node code '{other}'"
                )))
            }
        }
    }
    TreeShape::from_nodes(nodes)
        .map_err(|e| Error::parse(format!("line {line_no}: malformed tree: {e}")))
}

fn write_floats(out: &mut String, values: &[f64]) {
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        // 17 significant decimal digits round-trip an f64 exactly.
        let _ = write!(out, "{v:.16e}");
    }
}

/// Serialize a model to the SFF1 text format.
pub fn serialize(model: &ForestModel) -> String {
    let mut out = String::new();
    out.push_str("SFF1\n");
    let _ = writeln!(
        out,
        "block_size {} classes {}",
        model.spec.block_size, model.spec.class_count
    );
    let _ = writeln!(out, "grid {} {}", model.grid_width, model.grid_height);
    for (j, subset) in model.spec.subsets.iter().enumerate() {
        let classes = subset
            .classes
            .iter()
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join(" ");
        let tree = subset
            .tree
            .nodes()
            .iter()
            .map(|n| node_code(*n))
            .collect::<Vec<_>>()
            .join(" ");
        let _ = writeln!(out, "subset {j}: {classes} ; tree: {tree}");
    }
    for by in 0..model.grid_height {
        for bx in 0..model.grid_width {
            let block = model.block(bx, by);
            for (j, params) in block.subsets.iter().enumerate() {
                let _ = write!(out, "blk {bx} {by} {j} : ");
                write_floats(&mut out, &params.inner);
                out.push_str(" | ");
                write_floats(&mut out, &params.leaf_logits);
                out.push('\n');
            }
        }
    }
    out
}

struct LineReader<'a> {
    lines: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> LineReader<'a> {
    fn next(&mut self, expected: &str) -> Result<(usize, &'a str)> {
        self.lines
            .next()
            .map(|(i, l)| (i + 1, l))
            .ok_or_else(|| Error::parse(format!("file truncated: missing {expected}")))
    }
}

fn parse_float_list(text: &str, line_no: usize) -> Result<Vec<f64>> {
    text.split_whitespace()
        .map(|tok| {
            tok.parse::<f64>()
                .map_err(|_| Error::parse(format!("line {line_no}: bad float '{tok}'")))
        })
        .collect()
}

/// Parse an SFF1 text file back into a model.
pub fn deserialize(text: &str) -> Result<ForestModel> {
    let mut reader = LineReader {
        lines: text.lines().enumerate(),
    };

    let (n, magic) = reader.next("SFF1 header")?;
    if magic.trim() != "SFF1" {
        return Err(Error::parse(format!("line {n}: expected 'SFF1' header")));
    }

    let (n, line) = reader.next("block_size line")?;
    let toks: Vec<&str> = line.split_whitespace().collect();
    if toks.len() != 4 || toks[0] != "block_size" || toks[2] != "classes" {
        return Err(Error::parse(format!(
            "line {n}: expected 'block_size S classes C'"
        )));
    }
    let block_size: usize = toks[1]
        .parse()
        .map_err(|_| Error::parse(format!("line {n}: bad block_size '{}'", toks[1])))?;
    let class_count: usize = toks[3]
        .parse()
        .map_err(|_| Error::parse(format!("line {n}: bad class count '{}'", toks[3])))?;

    let (n, line) = reader.next("grid line")?;
    let toks: Vec<&str> = line.split_whitespace().collect();
    if toks.len() != 3 || toks[0] != "grid" {
        return Err(Error::parse(format!("line {n}: expected 'grid W H'")));
    }
    let grid_w: usize = toks[1]
        .parse()
        .map_err(|_| Error::parse(format!("line {n}: bad grid width '{}'", toks[1])))?;
    let grid_h: usize = toks[2]
        .parse()
        .map_err(|_| Error::parse(format!("line {n}: bad grid height '{}'", toks[2])))?;

    // Subset lines: read until every class is covered.
    let mut subsets: Vec<Subset> = Vec::new();
    let mut covered = 0usize;
    while covered < class_count {
        let (n, line) = reader.next(&format!("subset line {}", subsets.len()))?;
        let rest = line
            .strip_prefix("subset ")
            .ok_or_else(|| Error::parse(format!("line {n}: expected 'subset j: ...'")))?;
        let (idx_part, tail) = rest
            .split_once(':')
            .ok_or_else(|| Error::parse(format!("line {n}: missing ':' in subset line")))?;
        let j: usize = idx_part
            .trim()
            .parse()
            .map_err(|_| Error::parse(format!("line {n}: bad subset index '{idx_part}'")))?;
        if j != subsets.len() {
            return Err(Error::parse(format!(
                "line {n}: subset index {j}, expected {}",
                subsets.len()
            )));
        }
        let (classes_part, tree_part) = tail
            .split_once(';')
            .ok_or_else(|| Error::parse(format!("line {n}: missing ';' in subset line")))?;
        let tree_part = tree_part
            .trim()
            .strip_prefix("tree:")
            .ok_or_else(|| Error::parse(format!("line {n}: missing 'tree:' in subset line")))?;
        let classes: Vec<usize> = classes_part
            .split_whitespace()
            .map(|tok| {
                tok.parse::<usize>()
                    .map_err(|_| Error::parse(format!("line {n}: bad class index '{tok}'")))
            })
            .collect::<Result<_>>()?;
        let tree = parse_tree_codes(tree_part, n)?;
        covered += classes.len();
        subsets.push(Subset { classes, tree });
    }
    let spec = ForestSpec::new(block_size, class_count, subsets)
        .map_err(|e| Error::parse(format!("invalid spec: {e}")))?;

    // Block records in row-major order, one line per subset.
    let mut blocks: Vec<BlockParams> = Vec::with_capacity(grid_w * grid_h);
    for by in 0..grid_h {
        for bx in 0..grid_w {
            let mut subset_params = Vec::with_capacity(spec.subsets.len());
            for j in 0..spec.subsets.len() {
                let what = format!("record 'blk {bx} {by} {j}'");
                let (n, line) = reader.next(&what)?;
                let rest = line
                    .strip_prefix("blk ")
                    .ok_or_else(|| Error::parse(format!("line {n}: expected {what}")))?;
                let (head, payload) = rest
                    .split_once(':')
                    .ok_or_else(|| Error::parse(format!("line {n}: missing ':' in {what}")))?;
                let ids: Vec<&str> = head.split_whitespace().collect();
                if ids.len() != 3 || ids[0] != bx.to_string() || ids[1] != by.to_string()
                    || ids[2] != j.to_string()
                {
                    return Err(Error::parse(format!(
                        "line {n}: expected {what}, found 'blk {}'",
                        head.trim()
                    )));
                }
                let (inner_part, logits_part) = payload
                    .split_once('|')
                    .ok_or_else(|| Error::parse(format!("line {n}: missing '|' in {what}")))?;
                let inner = parse_float_list(inner_part, n)?;
                let leaf_logits = parse_float_list(logits_part, n)?;
                let subset = &spec.subsets[j];
                if inner.len() != subset.tree.inner_param_count() {
                    return Err(Error::parse(format!(
                        "line {n}: {} inner params, expected {}",
                        inner.len(),
                        subset.tree.inner_param_count()
                    )));
                }
                let want = subset.tree.leaf_count() * subset.classes.len();
                if leaf_logits.len() != want {
                    return Err(Error::parse(format!(
                        "line {n}: {} leaf logits, expected {want}",
                        leaf_logits.len()
                    )));
                }
                subset_params.push(SubsetParams { inner, leaf_logits });
            }
            blocks.push(BlockParams {
                subsets: subset_params,
            });
        }
    }
    ForestModel::new(spec, grid_w, grid_h, blocks)
        .map_err(|e| Error::parse(format!("inconsistent model: {e}")))
}
