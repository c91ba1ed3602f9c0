//! Multi-sensor observable decomposition of a three-node plant where every
//! node sees exactly one new eigenvalue and the eigenvalue 0 is seen by none.

use std::path::Path;

use distobs::cli::Scenario;
use distobs::decomp::multisensor_decompose;
use distobs::numkit::{eigenvalues, norm2};
use distobs::ToleranceConfig;

fn main() -> distobs::Result<()> {
    let sc = Scenario::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios/staircase.json"))?;
    let p = sc.plant()?;
    let d = multisensor_decompose(&p, &[1, 2, 3], &ToleranceConfig::default())?;

    println!("sub-state dimensions o = {:?}, unobservable dimension {}", d.o, d.u_dim);
    for s in 0..d.o.len() {
        if d.o[s] > 0 {
            println!("A_{0}{0} spectrum {1:?}", s + 1, eigenvalues(&d.block(s, s))?);
        }
    }
    println!("A_U spectrum {:?}", eigenvalues(&d.a_u())?);

    let back = &d.t * &d.abar * &d.t_inv;
    println!("round-trip error {:.2e}, cond(T) {:.2}", norm2(&(back - &p.a)), d.cond_t);
    Ok(())
}
