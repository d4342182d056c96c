//! Prints the plan text and a hex listing of the machine code.
//!
//! `cargo run -p spmm-jit --example dump_plan -- 45 v512 row`

use spmm_jit::native::{assemble, write_hex_dump};
use spmm_jit::{build_kernel, SimdTier, Strategy};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let d: usize = args.next().as_deref().unwrap_or("45").parse()?;
    let tier: SimdTier = args.next().as_deref().unwrap_or("v512").parse()?;
    let strategy: Strategy = args.next().as_deref().unwrap_or("row").parse()?;
    let plan = build_kernel(d, tier, strategy, Some(128))?;
    print!("{plan}");
    let code = assemble(&plan)?;
    println!("; {} bytes", code.len());
    write_hex_dump(std::io::stdout().lock(), &code)?;
    Ok(())
}
