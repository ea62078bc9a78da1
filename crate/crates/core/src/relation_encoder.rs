//! Per-frame object graphs and the two relation-aware graph attention layers.
//!
//! The spatial layer runs over label embeddings on a sparse graph whose edges
//! carry a relation class and a direction; the semantic layer runs over visual
//! features on a complete graph. Both use `M` heads whose outputs are
//! concatenated back to the node width and added to the input.

use crate::error::{Error, Result};
use crate::geometry::{classify_spatial_relation, BoundingBox, RelationRules};
use crate::numerics::{Graph, Scalar, Tensor, Var};

/// Relation label reserved for self-loops.
pub const SELF_LOOP_LABEL: usize = 0;

/// Number of label-keyed bias rows: self-loop plus the eleven relations.
pub const NUM_EDGE_LABELS: usize = 12;

/// Edge direction relative to the classified ordered pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EdgeDir {
    /// The edge of the pair as classified (and self-loops).
    Forward = 1,
    /// Its reverse companion.
    Backward = 2,
}

impl EdgeDir {
    fn slot(self) -> usize {
        self as usize - 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SpatialEdge {
    pub src: usize,
    pub dst: usize,
    pub label: usize,
    pub dir: EdgeDir,
}

/// Directed spatial graph of one frame. Node `i` attends over the sources of
/// the edges whose destination is `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialGraph {
    pub num_nodes: usize,
    pub edges: Vec<SpatialEdge>,
}

impl SpatialGraph {
    pub fn in_edges(&self, dst: usize) -> impl Iterator<Item = &SpatialEdge> {
        self.edges.iter().filter(move |e| e.dst == dst)
    }
}

/// Builds the spatial graph of a frame from its boxes.
///
/// Each unordered pair `i < j` is classified once as `(i, j)`; a relation
/// yields the edge `i → j` with direction 1 and its companion `j → i` with
/// direction 2, both carrying the class id. Every node gets a self-loop.
pub fn build_spatial_graph(boxes: &[BoundingBox], frame_diag: f64, rules: &RelationRules) -> Result<SpatialGraph> {
    if boxes.is_empty() {
        return Err(Error::EmptyFrame);
    }
    let n = boxes.len();
    let mut edges: Vec<SpatialEdge> = (0..n)
        .map(|i| SpatialEdge {
            src: i,
            dst: i,
            label: SELF_LOOP_LABEL,
            dir: EdgeDir::Forward,
        })
        .collect();
    for i in 0..n {
        for j in i + 1..n {
            if let Some(rel) = classify_spatial_relation(&boxes[i], &boxes[j], frame_diag, rules)? {
                let label = rel.class_id();
                edges.push(SpatialEdge {
                    src: i,
                    dst: j,
                    label,
                    dir: EdgeDir::Forward,
                });
                edges.push(SpatialEdge {
                    src: j,
                    dst: i,
                    label,
                    dir: EdgeDir::Backward,
                });
            }
        }
    }
    Ok(SpatialGraph { num_nodes: n, edges })
}

/// Bound parameters of one graph attention layer.
///
/// All projections are stored `[d × d]` (row-vector convention) and split
/// column-wise into `heads` chunks of width `d / heads`.
#[derive(Clone, Debug)]
pub struct GatParams {
    /// Message projection, one column block per head.
    pub w: Var,
    /// Query projection.
    pub u: Var,
    /// Key projections keyed by direction (two for spatial, one for semantic).
    pub v: Vec<Var>,
    /// `[12 × d]` label-keyed biases (spatial only). Each head adds the sum of
    /// its own chunk to the logit.
    pub label_bias: Option<Var>,
    pub heads: usize,
}

/// Layer output plus the per-head attention matrices (`[N × N]`, row = receiver).
#[derive(Clone, Debug)]
pub struct GatOutput {
    pub nodes: Var,
    pub attention: Vec<Var>,
}

/// Which (receiver, sender) pairs interact and how.
struct Neighborhood {
    /// Per direction, a 0/1 matrix selecting the pairs using that key projection.
    dir_masks: Vec<Option<Vec<bool>>>,
    /// Per pair, the bias label (`None` where there is no edge).
    labels: Option<Vec<Option<usize>>>,
    /// Pairs that exist; `None` means complete.
    edge_mask: Option<Vec<bool>>,
}

fn head_width(op: &'static str, d: usize, heads: usize) -> Result<usize> {
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::shape(op, &[d], &[heads]));
    }
    Ok(d / heads)
}

fn gat_layer<S: Scalar>(
    g: &Graph<S>,
    nodes: Var,
    p: &GatParams,
    hood: &Neighborhood,
    op: &'static str,
) -> Result<GatOutput> {
    let shape = g.shape(nodes);
    let [n, d] = shape[..] else {
        return Err(Error::shape(op, &shape, &[0, 0]));
    };
    let dh = head_width(op, d, p.heads)?;
    if p.v.len() != hood.dir_masks.len() {
        return Err(Error::Internal(format!(
            "{op}: {} key projections for {} directions",
            p.v.len(),
            hood.dir_masks.len()
        )));
    }

    let messages = g.matmul(nodes, p.w)?;
    let queries = g.matmul(nodes, p.u)?;
    let keys = p.v.iter().map(|&v| g.matmul(nodes, v)).collect::<Result<Vec<_>>>()?;
    let masks = hood
        .dir_masks
        .iter()
        .map(|m| {
            m.as_ref().map(|m| {
                let data = m.iter().map(|&b| if b { S::one() } else { S::zero() }).collect();
                g.constant(Tensor::new(vec![n, n], data).expect("n × n mask"))
            })
        })
        .collect::<Vec<_>>();

    let mut heads = Vec::with_capacity(p.heads);
    let mut attention = Vec::with_capacity(p.heads);
    for m in 0..p.heads {
        let q = g.narrow(queries, 1, m * dh, dh)?;
        let mut logits: Option<Var> = None;
        for (k, mask) in keys.iter().zip(&masks) {
            let km = g.narrow(*k, 1, m * dh, dh)?;
            let kt = g.transpose(km)?;
            let mut s = g.matmul(q, kt)?;
            if let Some(mask) = mask {
                s = g.mul(s, *mask)?;
            }
            logits = Some(match logits {
                Some(acc) => g.add(acc, s)?,
                None => s,
            });
        }
        let mut logits = logits.ok_or_else(|| Error::Internal(format!("{op}: no key projection")))?;
        if let (Some(bias), Some(labels)) = (p.label_bias, &hood.labels) {
            let chunk = g.narrow(bias, 1, m * dh, dh)?;
            let per_label = g.sum_axis(chunk, 1)?;
            let b = g.gather(per_label, labels.clone(), vec![n, n])?;
            logits = g.add(logits, b)?;
        }
        let alpha = g.softmax_masked(logits, 1, hood.edge_mask.as_deref())?;
        let msg = g.narrow(messages, 1, m * dh, dh)?;
        let agg = g.matmul(alpha, msg)?;
        heads.push(g.relu(agg));
        attention.push(alpha);
    }
    let cat = g.concat(&heads, 1)?;
    let out = g.add(cat, nodes)?;
    Ok(GatOutput { nodes: out, attention })
}

/// Spatial graph attention over label embeddings `[N × d_l]`.
///
/// For receiver `i` and sender `j` on an edge with direction `dir` and label
/// `lab`, head `m` scores `(U l_i)_mᵀ (V_dir l_j)_m + Σ b_lab[m]`, normalized
/// over the in-edges of `i`. The head output is `ReLU(Σ_j α_ij (W l_j)_m)`;
/// heads are concatenated and the input is added back.
pub fn spatial_gat_layer<S: Scalar>(
    g: &Graph<S>,
    labels: Var,
    graph: &SpatialGraph,
    p: &GatParams,
) -> Result<GatOutput> {
    let n = graph.num_nodes;
    let rows = g.shape(labels)[0];
    if rows != n {
        return Err(Error::shape("spatial_gat_layer", &[rows], &[n]));
    }
    let mut dir_masks = vec![vec![false; n * n]; 2];
    let mut labels_idx = vec![None; n * n];
    let mut edge_mask = vec![false; n * n];
    for e in &graph.edges {
        let at = e.dst * n + e.src;
        if edge_mask[at] {
            return Err(Error::Internal(format!("duplicate edge {} → {}", e.src, e.dst)));
        }
        if e.label >= NUM_EDGE_LABELS {
            return Err(Error::Index {
                index: e.label,
                len: NUM_EDGE_LABELS,
            });
        }
        edge_mask[at] = true;
        dir_masks[e.dir.slot()][at] = true;
        labels_idx[at] = Some(e.label);
    }
    if (0..n).any(|i| !edge_mask[i * n..(i + 1) * n].iter().any(|&b| b)) {
        return Err(Error::Internal("node without incoming edges".into()));
    }
    let hood = Neighborhood {
        dir_masks: dir_masks.into_iter().map(Some).collect(),
        labels: Some(labels_idx),
        edge_mask: Some(edge_mask),
    };
    gat_layer(g, labels, p, &hood, "spatial_gat_layer")
}

/// Complete semantic graph over the objects of one frame.
#[derive(Clone, Debug)]
pub struct SemanticGraph {
    pub num_nodes: usize,
    /// Row-stochastic `[N × N]` edge weights.
    pub edge_weights: Var,
}

/// `e[i, j] = softmax_j(W_s · [o_i; o_j])` with `W_s` of shape `[2·d_o × 1]`.
pub fn semantic_edge_weights<S: Scalar>(g: &Graph<S>, nodes: Var, w_s: Var) -> Result<Var> {
    let shape = g.shape(nodes);
    let [n, d] = shape[..] else {
        return Err(Error::shape("semantic_edge_weights", &shape, &[0, 0]));
    };
    let ws = g.shape(w_s);
    if ws != [2 * d, 1] {
        return Err(Error::shape("semantic_edge_weights", &ws, &[2 * d, 1]));
    }
    let first = g.narrow(w_s, 0, 0, d)?;
    let second = g.narrow(w_s, 0, d, d)?;
    let a = g.matmul(nodes, first)?; // [n × 1], score contribution of o_i
    let b = g.matmul(nodes, second)?; // [n × 1], of o_j
    let ones_row = g.constant(Tensor::filled(vec![1, n], S::one()));
    let ones_col = g.constant(Tensor::filled(vec![n, 1], S::one()));
    let rows = g.matmul(a, ones_row)?;
    let bt = g.transpose(b)?;
    let cols = g.matmul(ones_col, bt)?;
    let scores = g.add(rows, cols)?;
    g.softmax(scores, 1)
}

pub fn build_semantic_graph<S: Scalar>(g: &Graph<S>, features: Var, w_s: Var) -> Result<SemanticGraph> {
    let num_nodes = g.shape(features)[0];
    let edge_weights = semantic_edge_weights(g, features, w_s)?;
    Ok(SemanticGraph {
        num_nodes,
        edge_weights,
    })
}

/// Semantic graph attention over visual features `[N × d_o]`: a single key
/// projection, no bias, softmax over all nodes, then the same head
/// concatenation and residual as the spatial layer.
pub fn semantic_gat_layer<S: Scalar>(
    g: &Graph<S>,
    features: Var,
    graph: &SemanticGraph,
    p: &GatParams,
) -> Result<GatOutput> {
    let rows = g.shape(features)[0];
    if rows != graph.num_nodes {
        return Err(Error::shape("semantic_gat_layer", &[rows], &[graph.num_nodes]));
    }
    if p.label_bias.is_some() {
        return Err(Error::Internal("semantic layer takes no label bias".into()));
    }
    let hood = Neighborhood {
        dir_masks: vec![None],
        labels: None,
        edge_mask: None,
    };
    gat_layer(g, features, p, &hood, "semantic_gat_layer")
}

/// Inputs of one frame, already registered in the graph.
#[derive(Clone, Debug)]
pub struct FrameNodes {
    /// `[N × d_l]` label embeddings.
    pub labels: Var,
    /// `[N × d_o]` visual features.
    pub features: Var,
    pub spatial: SpatialGraph,
}

#[derive(Clone, Debug)]
pub struct EncodedFrame {
    /// Updated label embeddings (visual concepts).
    pub labels: Var,
    /// Updated visual features.
    pub features: Var,
    pub semantic: SemanticGraph,
}

/// Runs both layers on every frame with the same parameters.
pub fn encode_video<S: Scalar>(
    g: &Graph<S>,
    frames: &[FrameNodes],
    spatial: &GatParams,
    semantic: &GatParams,
    w_s: Var,
) -> Result<Vec<EncodedFrame>> {
    if frames.is_empty() {
        return Err(Error::Config("video has no frames".into()));
    }
    for (t, f) in frames.iter().enumerate() {
        let (nl, nf) = (g.shape(f.labels)[0], g.shape(f.features)[0]);
        if nl != f.spatial.num_nodes || nf != f.spatial.num_nodes {
            return Err(Error::shape("encode_video", &[nl, nf], &[f.spatial.num_nodes]).in_frame(t));
        }
    }
    frames
        .iter()
        .enumerate()
        .map(|(t, f)| {
            let encode = || -> Result<EncodedFrame> {
                let labels = spatial_gat_layer(g, f.labels, &f.spatial, spatial)?.nodes;
                let sem = build_semantic_graph(g, f.features, w_s)?;
                let features = semantic_gat_layer(g, f.features, &sem, semantic)?.nodes;
                Ok(EncodedFrame {
                    labels,
                    features,
                    semantic: sem,
                })
            };
            encode().map_err(|e| e.in_frame(t))
        })
        .collect()
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::geometry::frame_diagonal;
    use crate::numerics::{grad_check, DEFAULT_EPS};

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
        BoundingBox::new(x1, y1, x2, y2).unwrap()
    }

    fn rand_mat(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn tensor(rows: usize, cols: usize, data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(vec![rows, cols], data).unwrap()
    }

    // ---- straight-line reference evaluation --------------------------------

    fn mv(x: &[f64], m: &[f64], d: usize) -> Vec<f64> {
        // row vector x [d] times m [d × d]
        (0..d).map(|c| (0..d).map(|r| x[r] * m[r * d + c]).sum()).collect()
    }

    struct RefEdge {
        src: usize,
        dst: usize,
        label: usize,
        dir: usize,
    }

    /// Loop-by-loop evaluation of the multi-head layer for one node set.
    #[allow(clippy::too_many_arguments)]
    fn reference_layer(
        x: &[Vec<f64>],
        edges: &[RefEdge],
        w: &[f64],
        u: &[f64],
        v: &[&[f64]],
        bias: Option<&[f64]>,
        heads: usize,
    ) -> (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>) {
        let n = x.len();
        let d = x[0].len();
        let dh = d / heads;
        let mut out = vec![vec![0.0; d]; n];
        let mut alphas = vec![vec![vec![0.0; n]; n]; heads];
        for i in 0..n {
            let q = mv(&x[i], u, d);
            for m in 0..heads {
                let cols = m * dh..(m + 1) * dh;
                let nbrs: Vec<&RefEdge> = edges.iter().filter(|e| e.dst == i).collect();
                let logits: Vec<f64> = nbrs
                    .iter()
                    .map(|e| {
                        let k = mv(&x[e.src], v[e.dir - 1], d);
                        let dot: f64 = cols.clone().map(|c| q[c] * k[c]).sum();
                        let b: f64 = bias.map_or(0.0, |b| cols.clone().map(|c| b[e.label * d + c]).sum());
                        dot + b
                    })
                    .collect();
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
                let mut acc = vec![0.0; dh];
                for (e, l) in nbrs.iter().zip(&logits) {
                    let a = (l - mx).exp() / z;
                    alphas[m][i][e.src] = a;
                    let msg = mv(&x[e.src], w, d);
                    for (t, c) in cols.clone().enumerate() {
                        acc[t] += a * msg[c];
                    }
                }
                for (t, c) in cols.clone().enumerate() {
                    out[i][c] = acc[t].max(0.0) + x[i][c];
                }
            }
        }
        (out, alphas)
    }

    struct Toy {
        d: usize,
        heads: usize,
        x: Vec<Vec<f64>>,
        w: Vec<f64>,
        u: Vec<f64>,
        v1: Vec<f64>,
        v2: Vec<f64>,
        bias: Vec<f64>,
    }

    fn toy(seed: u64) -> Toy {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, heads) = (6, 3);
        Toy {
            d,
            heads,
            x: (0..3).map(|_| rand_mat(1, d, &mut rng)).collect(),
            w: rand_mat(d, d, &mut rng),
            u: rand_mat(d, d, &mut rng),
            v1: rand_mat(d, d, &mut rng),
            v2: rand_mat(d, d, &mut rng),
            bias: rand_mat(NUM_EDGE_LABELS, d, &mut rng),
        }
    }

    fn toy_spatial_graph() -> SpatialGraph {
        // 0 covers 1; 2 sits to the right of 0 within the gate, far from 1
        let boxes = [
            bx(0.0, 0.0, 10.0, 10.0),
            bx(2.0, 2.0, 4.0, 4.0),
            bx(30.0, 0.0, 40.0, 10.0),
        ];
        build_spatial_graph(&boxes, 100.0, &RelationRules::default()).unwrap()
    }

    fn bind_spatial(g: &Graph<f64>, t: &Toy) -> GatParams {
        GatParams {
            w: g.param(tensor(t.d, t.d, &t.w)),
            u: g.param(tensor(t.d, t.d, &t.u)),
            v: vec![g.param(tensor(t.d, t.d, &t.v1)), g.param(tensor(t.d, t.d, &t.v2))],
            label_bias: Some(g.param(tensor(NUM_EDGE_LABELS, t.d, &t.bias))),
            heads: t.heads,
        }
    }

    #[test]
    fn single_object_frame_has_only_self_loop() {
        let graph = build_spatial_graph(&[bx(0.0, 0.0, 1.0, 1.0)], 10.0, &RelationRules::default()).unwrap();
        assert_eq!(
            graph.edges,
            vec![SpatialEdge {
                src: 0,
                dst: 0,
                label: SELF_LOOP_LABEL,
                dir: EdgeDir::Forward
            }]
        );
        assert!(matches!(
            build_spatial_graph(&[], 10.0, &RelationRules::default()),
            Err(Error::EmptyFrame)
        ));
    }

    #[test]
    fn overlapping_boxes_get_reciprocal_overlap_edges() {
        let boxes = [bx(0.0, 0.0, 10.0, 10.0), bx(1.0, 0.0, 11.0, 10.0)];
        let graph = build_spatial_graph(&boxes, 100.0, &RelationRules::default()).unwrap();
        let pair: Vec<_> = graph.edges.iter().filter(|e| e.src != e.dst).collect();
        assert_eq!(pair.len(), 2);
        assert!(pair.iter().all(|e| e.label == 3));
        assert_eq!((pair[0].src, pair[0].dst, pair[0].dir), (0, 1, EdgeDir::Forward));
        assert_eq!((pair[1].src, pair[1].dst, pair[1].dir), (1, 0, EdgeDir::Backward));
    }

    #[test]
    fn edge_set_matches_pairwise_classification() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let rules = RelationRules::default();
        for _ in 0..50 {
            let boxes: Vec<BoundingBox> = (0..4)
                .map(|_| {
                    let (x, y) = (rng.gen_range(0.0..200.0), rng.gen_range(0.0..100.0));
                    bx(x, y, x + rng.gen_range(5.0..80.0), y + rng.gen_range(5.0..60.0))
                })
                .collect();
            let diag = frame_diagonal(240.0, 160.0);
            let graph = build_spatial_graph(&boxes, diag, &rules).unwrap();
            let mut expected = std::collections::HashSet::new();
            for i in 0..4 {
                expected.insert((i, i, 0, 1));
                for j in 0..4 {
                    if i < j {
                        if let Some(r) = classify_spatial_relation(&boxes[i], &boxes[j], diag, &rules).unwrap() {
                            expected.insert((i, j, r.class_id(), 1));
                            expected.insert((j, i, r.class_id(), 2));
                        }
                    }
                }
            }
            let got: std::collections::HashSet<_> = graph
                .edges
                .iter()
                .map(|e| (e.src, e.dst, e.label, e.dir as usize))
                .collect();
            assert_eq!(got.len(), graph.edges.len(), "duplicate edges");
            assert_eq!(got, expected);
        }
    }

    #[test]
    fn spatial_layer_matches_reference() {
        let t = toy(21);
        let graph = toy_spatial_graph();
        let g = Graph::new();
        let flat: Vec<f64> = t.x.concat();
        let x = g.constant(tensor(3, t.d, &flat));
        let p = bind_spatial(&g, &t);
        let out = spatial_gat_layer(&g, x, &graph, &p).unwrap();

        let edges: Vec<RefEdge> = graph
            .edges
            .iter()
            .map(|e| RefEdge {
                src: e.src,
                dst: e.dst,
                label: e.label,
                dir: e.dir as usize,
            })
            .collect();
        let (want, alphas) = reference_layer(&t.x, &edges, &t.w, &t.u, &[&t.v1, &t.v2], Some(&t.bias), t.heads);
        let got = g.data(out.nodes);
        for (a, b) in got.iter().zip(want.concat()) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
        for (m, att) in out.attention.iter().enumerate() {
            let a = g.data(*att);
            for i in 0..3 {
                for j in 0..3 {
                    assert!((a[i * 3 + j] - alphas[m][i][j]).abs() < 1e-10);
                }
                let row: f64 = a[i * 3..i * 3 + 3].iter().sum();
                assert!((row - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn semantic_layer_matches_reference() {
        let t = toy(22);
        let g = Graph::new();
        let x = g.constant(tensor(3, t.d, &t.x.concat()));
        let p = GatParams {
            w: g.param(tensor(t.d, t.d, &t.w)),
            u: g.param(tensor(t.d, t.d, &t.u)),
            v: vec![g.param(tensor(t.d, t.d, &t.v1))],
            label_bias: None,
            heads: t.heads,
        };
        let w_s = g.param(Tensor::zeros(vec![2 * t.d, 1]));
        let sem = build_semantic_graph(&g, x, w_s).unwrap();
        let out = semantic_gat_layer(&g, x, &sem, &p).unwrap();
        let edges: Vec<RefEdge> = (0..3)
            .flat_map(|i| {
                (0..3).map(move |j| RefEdge {
                    src: j,
                    dst: i,
                    label: 0,
                    dir: 1,
                })
            })
            .collect();
        let (want, _) = reference_layer(&t.x, &edges, &t.w, &t.u, &[&t.v1], None, t.heads);
        for (a, b) in g.data(out.nodes).iter().zip(want.concat()) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn single_node_attends_to_itself() {
        let t = toy(23);
        let graph = build_spatial_graph(&[bx(0.0, 0.0, 1.0, 1.0)], 10.0, &RelationRules::default()).unwrap();
        let g = Graph::new();
        let x = g.constant(tensor(1, t.d, &t.x[0]));
        let p = bind_spatial(&g, &t);
        let out = spatial_gat_layer(&g, x, &graph, &p).unwrap();
        for a in &out.attention {
            assert_eq!(g.data(*a), vec![1.0]);
        }

        // semantic: output = relu(x W) + x
        let sp = GatParams {
            label_bias: None,
            v: vec![p.v[0]],
            ..p.clone()
        };
        let w_s = g.param(Tensor::zeros(vec![2 * t.d, 1]));
        let sem = build_semantic_graph(&g, x, w_s).unwrap();
        assert_eq!(g.data(sem.edge_weights), vec![1.0]);
        let out = semantic_gat_layer(&g, x, &sem, &sp).unwrap();
        let xw = mv(&t.x[0], &t.w, t.d);
        for c in 0..t.d {
            let want = xw[c].max(0.0) + t.x[0][c];
            assert!((g.data(out.nodes)[c] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_weights_make_both_layers_identity() {
        let t = toy(24);
        let graph = toy_spatial_graph();
        let g = Graph::new();
        let x = g.constant(tensor(3, t.d, &t.x.concat()));
        let zero = || g.param(Tensor::zeros(vec![t.d, t.d]));
        let p = GatParams {
            w: zero(),
            u: zero(),
            v: vec![zero(), zero()],
            label_bias: Some(g.param(Tensor::zeros(vec![NUM_EDGE_LABELS, t.d]))),
            heads: t.heads,
        };
        let out = spatial_gat_layer(&g, x, &graph, &p).unwrap();
        assert_eq!(g.data(out.nodes), t.x.concat());
        let sp = GatParams {
            v: vec![p.v[0]],
            label_bias: None,
            ..p.clone()
        };
        let w_s = g.param(Tensor::zeros(vec![2 * t.d, 1]));
        let sem = build_semantic_graph(&g, x, w_s).unwrap();
        let out = semantic_gat_layer(&g, x, &sem, &sp).unwrap();
        assert_eq!(g.data(out.nodes), t.x.concat());
    }

    #[test]
    fn semantic_edge_weight_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let d = 4;
        let ws = rand_mat(2 * d, 1, &mut rng);
        let g = Graph::new();
        let w_s = g.constant(tensor(2 * d, 1, &ws));

        let one = g.constant(tensor(1, d, &rand_mat(1, d, &mut rng)));
        assert_eq!(g.data(semantic_edge_weights(&g, one, w_s).unwrap()), vec![1.0]);

        let row = rand_mat(1, d, &mut rng);
        let same = g.constant(tensor(3, d, &[row.clone(), row.clone(), row].concat()));
        for v in g.data(semantic_edge_weights(&g, same, w_s).unwrap()) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        // direct evaluation: exp(W_s·[o_i; o_j]) normalized over j
        let o: Vec<Vec<f64>> = (0..3).map(|_| rand_mat(1, d, &mut rng)).collect();
        let x = g.constant(tensor(3, d, &o.concat()));
        let e = g.data(semantic_edge_weights(&g, x, w_s).unwrap());
        for i in 0..3 {
            let scores: Vec<f64> = (0..3)
                .map(|j| {
                    let cat: Vec<f64> = o[i].iter().chain(&o[j]).copied().collect();
                    cat.iter().zip(&ws).map(|(a, b)| a * b).sum::<f64>()
                })
                .collect();
            let z: f64 = scores.iter().map(|s| s.exp()).sum();
            for j in 0..3 {
                assert!((e[i * 3 + j] - scores[j].exp() / z).abs() < 1e-12);
            }
        }
        let bad = g.constant(Tensor::zeros(vec![d, 1]));
        assert!(semantic_edge_weights(&g, x, bad).is_err());
    }

    #[test]
    fn head_width_must_divide_node_width() {
        let t = toy(26);
        let g = Graph::new();
        let x = g.constant(tensor(3, t.d, &t.x.concat()));
        let mut p = bind_spatial(&g, &t);
        p.heads = 4;
        assert!(spatial_gat_layer(&g, x, &toy_spatial_graph(), &p).is_err());
    }

    #[test]
    fn both_layers_pass_grad_check() {
        // seed picked so no ReLU input sits within the finite-difference step of 0
        let t = toy(43);
        let graph = toy_spatial_graph();
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        let params = vec![
            tensor(3, t.d, &t.x.concat()),
            tensor(t.d, t.d, &t.w),
            tensor(t.d, t.d, &t.u),
            tensor(t.d, t.d, &t.v1),
            tensor(t.d, t.d, &t.v2),
            tensor(NUM_EDGE_LABELS, t.d, &t.bias),
        ];
        let weights = tensor(3, t.d, &rand_mat(3, t.d, &mut rng));
        let report = grad_check(&params, DEFAULT_EPS, |g, v| {
            let sp = GatParams {
                w: v[1],
                u: v[2],
                v: vec![v[3], v[4]],
                label_bias: Some(v[5]),
                heads: t.heads,
            };
            let se = GatParams {
                w: v[2],
                u: v[1],
                v: vec![v[4]],
                label_bias: None,
                heads: t.heads,
            };
            let a = spatial_gat_layer(g, v[0], &graph, &sp)?.nodes;
            let sem = SemanticGraph {
                num_nodes: 3,
                edge_weights: v[0],
            };
            let b = semantic_gat_layer(g, a, &sem, &se)?.nodes;
            let w = g.constant(weights.clone());
            let p = g.mul(b, w)?;
            Ok(g.sum(p))
        })
        .unwrap();
        for (i, c) in report.iter().enumerate() {
            assert!(c.max_rel_error < 1e-4, "param {i}: {c:?}");
        }
    }

    #[test]
    fn semantic_edge_weight_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let d = 4;
        let params = vec![
            tensor(3, d, &rand_mat(3, d, &mut rng)),
            tensor(2 * d, 1, &rand_mat(2 * d, 1, &mut rng)),
        ];
        let weights = tensor(3, 3, &rand_mat(3, 3, &mut rng));
        let objective = |g: &Graph<f64>, v: &[Var]| {
            let e = semantic_edge_weights(g, v[0], v[1])?;
            let w = g.constant(weights.clone());
            let p = g.mul(e, w)?;
            Ok(g.sum(p))
        };
        let report = grad_check(&params, DEFAULT_EPS, objective).unwrap();
        assert!(report[0].max_rel_error < 1e-4, "{:?}", report[0]);

        // The o_i half of W_s adds a constant to every logit of row i, which
        // the row softmax cancels: its gradient is exactly zero. The o_j half
        // carries the whole signal.
        let g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
        let out = objective(&g, &vars).unwrap();
        g.backward(out).unwrap();
        let grad = g.value(vars[1]).grad().unwrap().to_vec();
        assert!(grad[..d].iter().all(|v| v.abs() < 1e-15), "{grad:?}");
        assert!(grad[d..].iter().any(|v| v.abs() > 1e-3));
        let eps = DEFAULT_EPS;
        for i in d..2 * d {
            let eval = |delta: f64| {
                let mut p = params.clone();
                p[1].data_mut()[i] += delta;
                let g = Graph::new();
                let vars: Vec<Var> = p.iter().map(|t| g.constant(t.clone())).collect();
                g.scalar(objective(&g, &vars).unwrap())
            };
            let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
            assert!(crate::numerics::relative_error(grad[i], numeric) < 1e-4);
        }
    }

    #[test]
    fn video_encoding_is_per_frame() {
        let t = toy(29);
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let boxes = [
            vec![
                bx(0.0, 0.0, 10.0, 10.0),
                bx(2.0, 2.0, 4.0, 4.0),
                bx(30.0, 0.0, 40.0, 10.0),
            ],
            vec![
                bx(0.0, 0.0, 10.0, 10.0),
                bx(5.0, 0.0, 15.0, 10.0),
                bx(60.0, 60.0, 70.0, 70.0),
            ],
            vec![
                bx(5.0, 5.0, 6.0, 6.0),
                bx(50.0, 0.0, 52.0, 2.0),
                bx(0.0, 0.0, 90.0, 90.0),
            ],
        ];
        let labels: Vec<Vec<f64>> = (0..3).map(|_| rand_mat(3, t.d, &mut rng)).collect();
        let feats: Vec<Vec<f64>> = (0..3).map(|_| rand_mat(3, t.d, &mut rng)).collect();
        let ws = rand_mat(2 * t.d, 1, &mut rng);

        let run = |order: &[usize]| -> Vec<(Vec<f64>, Vec<f64>)> {
            let g = Graph::new();
            let sp = bind_spatial(&g, &t);
            let se = GatParams {
                v: vec![sp.v[0]],
                label_bias: None,
                ..sp.clone()
            };
            let w_s = g.param(tensor(2 * t.d, 1, &ws));
            let frames: Vec<FrameNodes> = order
                .iter()
                .map(|&f| FrameNodes {
                    labels: g.constant(tensor(3, t.d, &labels[f])),
                    features: g.constant(tensor(3, t.d, &feats[f])),
                    spatial: build_spatial_graph(&boxes[f], 100.0, &RelationRules::default()).unwrap(),
                })
                .collect();
            encode_video(&g, &frames, &sp, &se, w_s)
                .unwrap()
                .iter()
                .map(|e| (g.data(e.labels), g.data(e.features)))
                .collect()
        };
        let base = run(&[0, 1, 2]);
        let perm = run(&[2, 0, 1]);
        assert_eq!(perm, vec![base[2].clone(), base[0].clone(), base[1].clone()]);
        let dup = run(&[1, 1]);
        assert_eq!(dup[0], dup[1]);
        assert_eq!(dup[0], base[1]);
        let singles: Vec<_> = (0..3).map(|f| run(&[f]).remove(0)).collect();
        assert_eq!(singles, base);
    }

    #[test]
    fn frame_errors_carry_the_frame_index() {
        let t = toy(31);
        let g = Graph::new();
        let sp = bind_spatial(&g, &t);
        let se = GatParams {
            v: vec![sp.v[0]],
            label_bias: None,
            ..sp.clone()
        };
        let w_s = g.param(Tensor::zeros(vec![2 * t.d, 1]));
        let good = FrameNodes {
            labels: g.constant(Tensor::zeros(vec![1, t.d])),
            features: g.constant(Tensor::zeros(vec![1, t.d])),
            spatial: build_spatial_graph(&[bx(0.0, 0.0, 1.0, 1.0)], 10.0, &RelationRules::default()).unwrap(),
        };
        let bad = FrameNodes {
            features: g.constant(Tensor::zeros(vec![2, t.d])),
            ..good.clone()
        };
        let err = encode_video(&g, &[good, bad], &sp, &se, w_s).unwrap_err();
        assert!(matches!(err, Error::Frame { frame: 1, .. }), "{err}");
    }
}
