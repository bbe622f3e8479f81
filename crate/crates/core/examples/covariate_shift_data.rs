//! Generates every dataset family, prints class balance per domain, and shows
//! one clean and one shifted digit as ASCII art.

use shiftlab::data::{generate_split, ShiftFamily};

fn main() -> shiftlab::Result<()> {
    let cases = [
        (ShiftFamily::TwoMoonsRotate, vec!["rot0", "rot40", "rot80"]),
        (ShiftFamily::SynthDigits, vec!["clean", "noisy_bg", "inverted", "thick"]),
    ];
    for (fam, domains) in cases {
        for d in domains {
            let (train, _) = generate_split(&fam, &d.parse()?, 200, 10, 0.05, 1)?;
            println!("{:<16} {:<9} counts {:?}", fam.name(), d, train.class_counts());
        }
    }
    for d in ["clean", "noisy_bg"] {
        let (train, _) = generate_split(&ShiftFamily::SynthDigits, &d.parse()?, 20, 10, 0.05, 4)?;
        println!("\n{d}, label {}", train.y[0]);
        for row in train.x.data()[..64].chunks(8) {
            let line: String = row.iter().map(|v| if *v > 0.66 { '#' } else if *v > 0.33 { '+' } else { '.' }).collect();
            println!("  {line}");
        }
    }
    Ok(())
}
