//! Renames functions, parameters and locals with a seed and checks that the
//! graph keeps its shape.

use cgbridge::cpg::{canonical_form, extract, obfuscate_identifiers, SourceUnit};

fn main() -> cgbridge::Result<()> {
    let unit = SourceUnit::python(
        "mean",
        "def mean(values):\n    n = len(values)\n    s = 0\n    for v in values:\n        s = s + v\n    return s / n\n",
    )?;
    let original = canonical_form(&extract(&unit)?);
    for seed in [1, 2, 7] {
        let renamed = obfuscate_identifiers(&unit, seed)?;
        let same = canonical_form(&extract(&renamed)?) == original;
        println!("seed {seed} (isomorphic: {same})\n{}", renamed.code);
    }
    Ok(())
}
