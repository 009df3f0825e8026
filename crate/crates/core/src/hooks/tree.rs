//! Nested layer outputs and their flatten/unflatten traversal.
//!
//! Leaves are visited depth-first, left to right. Opaque leaves are carried
//! through by reference so `unflatten(flatten(t))` preserves their identity.

use std::any::Any;
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::parallel::DistTensor;

/// A non-tensor value riding along in a layer output.
#[derive(Clone)]
pub struct Opaque(Arc<dyn Any + Send + Sync>);

impl Opaque {
    pub fn new<V: Any + Send + Sync>(v: V) -> Self {
        Self(Arc::new(v))
    }

    pub fn downcast_ref<V: Any>(&self) -> Option<&V> {
        self.0.downcast_ref()
    }

    pub fn same_as(&self, other: &Opaque) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }
}

impl PartialEq for Opaque {
    fn eq(&self, other: &Self) -> bool {
        self.same_as(other)
    }
}

impl fmt::Debug for Opaque {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Opaque({:p})", Arc::as_ptr(&self.0))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TreeNode<T> {
    Tensor(DistTensor<T>),
    Opaque(Opaque),
    List(Vec<TreeNode<T>>),
    /// Named children in insertion order.
    Map(Vec<(String, TreeNode<T>)>),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Leaf<T> {
    Tensor(DistTensor<T>),
    Opaque(Opaque),
}

impl<T> Leaf<T> {
    pub fn as_tensor(&self) -> Option<&DistTensor<T>> {
        match self {
            Leaf::Tensor(t) => Some(t),
            Leaf::Opaque(_) => None,
        }
    }
}

/// The container skeleton of a tree, with leaves elided.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TreeDef {
    Leaf,
    List(Vec<TreeDef>),
    Map(Vec<(String, TreeDef)>),
}

impl TreeDef {
    pub fn num_leaves(&self) -> usize {
        match self {
            TreeDef::Leaf => 1,
            TreeDef::List(xs) => xs.iter().map(TreeDef::num_leaves).sum(),
            TreeDef::Map(xs) => xs.iter().map(|(_, d)| d.num_leaves()).sum(),
        }
    }
}

pub fn flatten<T>(tree: TreeNode<T>) -> (Vec<Leaf<T>>, TreeDef) {
    fn go<T>(node: TreeNode<T>, leaves: &mut Vec<Leaf<T>>) -> TreeDef {
        match node {
            TreeNode::Tensor(t) => {
                leaves.push(Leaf::Tensor(t));
                TreeDef::Leaf
            }
            TreeNode::Opaque(o) => {
                leaves.push(Leaf::Opaque(o));
                TreeDef::Leaf
            }
            TreeNode::List(xs) => TreeDef::List(xs.into_iter().map(|x| go(x, leaves)).collect()),
            TreeNode::Map(xs) => TreeDef::Map(xs.into_iter().map(|(k, x)| (k, go(x, leaves))).collect()),
        }
    }
    let mut leaves = Vec::new();
    let def = go(tree, &mut leaves);
    (leaves, def)
}

pub fn unflatten<T>(def: &TreeDef, leaves: Vec<Leaf<T>>) -> Result<TreeNode<T>> {
    fn go<T>(def: &TreeDef, it: &mut std::vec::IntoIter<Leaf<T>>) -> Result<TreeNode<T>> {
        Ok(match def {
            TreeDef::Leaf => match it.next() {
                Some(Leaf::Tensor(t)) => TreeNode::Tensor(t),
                Some(Leaf::Opaque(o)) => TreeNode::Opaque(o),
                None => return Err(Error::Tree("ran out of leaves".into())),
            },
            TreeDef::List(xs) => TreeNode::List(xs.iter().map(|d| go(d, it)).collect::<Result<_>>()?),
            TreeDef::Map(xs) => TreeNode::Map(
                xs.iter()
                    .map(|(k, d)| Ok((k.clone(), go(d, it)?)))
                    .collect::<Result<_>>()?,
            ),
        })
    }
    let want = def.num_leaves();
    if leaves.len() != want {
        return Err(Error::Tree(format!(
            "structure has {want} leaves, got {}",
            leaves.len()
        )));
    }
    let mut it = leaves.into_iter();
    go(def, &mut it)
}

impl<T: Clone> TreeNode<T> {
    /// The first tensor leaf in traversal order.
    pub fn first_tensor(&self) -> Option<&DistTensor<T>> {
        match self {
            TreeNode::Tensor(t) => Some(t),
            TreeNode::Opaque(_) => None,
            TreeNode::List(xs) => xs.iter().find_map(TreeNode::first_tensor),
            TreeNode::Map(xs) => xs.iter().find_map(|(_, x)| x.first_tensor()),
        }
    }
}
