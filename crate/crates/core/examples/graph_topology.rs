//! Communication graphs: neighbor sets, the Laplacian and the topology
//! check run before any learning.

use mas_ioql::{Digraph, Result};
use nalgebra::{DMatrix, DVector};

pub fn run() -> Result<()> {
    let ring = Digraph::ring(3, DVector::from_vec(vec![1.0, 0.0, 0.0]))?;
    ring.validate_tracking_topology()?;
    for i in 0..ring.node_count() {
        println!("agent {i}: in-degree {}, neighbors {:?}, pinned {}", ring.in_degree(i)?, ring.neighbors(i)?, ring.pinning(i)? > 0.0);
    }
    println!("Laplacian:{}", ring.laplacian());

    // A chain is not strongly connected and is rejected.
    let mut chain = DMatrix::zeros(3, 3);
    chain[(1, 0)] = 1.0;
    chain[(2, 1)] = 1.0;
    let chain = Digraph::new(chain, DVector::from_vec(vec![1.0, 0.0, 0.0]))?;
    match chain.validate_tracking_topology() {
        Ok(()) => println!("chain accepted"),
        Err(e) => println!("chain rejected: {e}"),
    }
    let unpinned = Digraph::ring(3, DVector::zeros(3))?;
    if let Err(e) = unpinned.validate_tracking_topology() {
        println!("unpinned ring rejected: {e}");
    }
    Ok(())
}

fn main() -> Result<()> {
    run()
}
