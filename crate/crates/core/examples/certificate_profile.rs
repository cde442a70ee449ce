//! Certificate values against geodesic distance on a ring: they decay faster at large ε.

use sparse_iot::graph::{certificate_profile, gen_circular};

fn main() -> sparse_iot::Result<()> {
    let eps = [0.1, 1.0, 10.0];
    let prof = certificate_profile(&gen_circular(20)?, &eps, false)?;
    println!("d_geod  {}", eps.map(|e| format!("{:>10}", format!("ε={e}"))).join(""));
    for d in 0..=10 {
        let line: String = eps
            .iter()
            .map(|&e| {
                let zs: Vec<f64> = prof.rows.iter().filter(|r| r.eps == e && r.d_geod == d).map(|r| r.z.abs()).collect();
                format!("{:10.4}", zs.iter().sum::<f64>() / zs.len() as f64)
            })
            .collect();
        println!("{d:6}  {line}");
    }
    for (e, m) in &prof.margins {
        println!("margin at ε = {e}: {m:+.4}");
    }
    Ok(())
}
