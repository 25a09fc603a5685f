mod conv;
mod elementwise;
mod linalg;
mod loss;
mod norm;
mod pool;
mod shape;

pub use conv::conv2d_direct;
pub use loss::{log_softmax_rows, softmax_rows};
pub use norm::BatchStats;
pub(crate) use shape::permute_tensor;

use crate::error::Result;
use crate::graph::{Graph, Node, Op, Var};
use crate::real::Real;
use crate::tensor::Tensor;

pub(crate) fn backward<T: Real>(
    graph: &Graph<T>,
    node: &Node<T>,
    g: &Tensor<T>,
) -> Result<Vec<(Var, Tensor<T>)>> {
    match &node.op {
        Op::Leaf => Ok(vec![]),
        op @ (Op::Add(..) | Op::Sub(..) | Op::Mul(..)) => elementwise::backward_binary(graph, op, g),
        op @ (Op::Scale(..)
        | Op::Relu(_)
        | Op::Sigmoid(_)
        | Op::Sqrt(_)
        | Op::ClampMin(..)
        | Op::Sum(_)
        | Op::Mean(_)
        | Op::SumAxis(_)) => elementwise::backward_unary(graph, op, &node.value, g),
        op @ (Op::Reshape(_) | Op::Permute(..) | Op::Concat(..)) => shape::backward(graph, op, g),
        op @ (Op::MatMul { .. } | Op::Bmm { .. }) => linalg::backward(graph, op, g),
        op @ Op::Conv2d { .. } => conv::backward(graph, op, g),
        op @ Op::BatchNorm { .. } => norm::backward(graph, op, g),
        op @ (Op::AvgPool { .. } | Op::GlobalAvg(_) | Op::ChannelMean(_) | Op::Select { .. }) => {
            pool::backward(graph, op, g)
        }
        op @ Op::LogSoftmax(_) => loss::backward(graph, op, &node.value, g),
    }
}
