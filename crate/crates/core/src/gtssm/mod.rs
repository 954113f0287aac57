//! Graph-traversal selective state space: the similarity graph and its
//! spanning tree, the tree recurrence, and the gated layer built on it.

pub mod graph;
pub mod gss;
pub mod ssm;

pub use graph::{boruvka_mst, bto_order, build_knn_graph, Edge, SequenceGraph, SpanningTree};
pub use gss::{similarity_tree, GssVars, GssWeights};
pub use ssm::{discretize, gt_ssm_bruteforce, gt_ssm_fast, ssm_output, tree_scan};
