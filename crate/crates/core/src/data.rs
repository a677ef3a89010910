//! Procedural product corpus: garments described by a small attribute tuple,
//! rendered so that every attribute lands in a known image region, and
//! described by a fixed template.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::Image;

macro_rules! attribute_enum {
    ($name:ident { $($variant:ident => $word:literal),+ $(,)? }) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn word(self) -> &'static str {
                match self { $($name::$variant => $word),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.word())
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                $name::ALL
                    .iter()
                    .copied()
                    .find(|v| v.word() == s)
                    .ok_or_else(|| Error::arg(format!(concat!("unknown ", stringify!($name), " {:?}"), s)))
            }
        }
    };
}

attribute_enum!(Color {
    Black => "black",
    White => "white",
    Red => "red",
    Green => "green",
    Blue => "blue",
    Yellow => "yellow",
    Orange => "orange",
    Purple => "purple",
    Pink => "pink",
    Brown => "brown",
    Gray => "gray",
    Navy => "navy",
});

attribute_enum!(Pattern {
    Plain => "plain",
    Striped => "striped",
    Checked => "checked",
});

attribute_enum!(Shape {
    Top => "top",
    Pants => "pants",
    Dress => "dress",
});

attribute_enum!(Sleeve {
    Long => "long",
    Short => "short",
    None => "none",
});

impl Color {
    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Black => [20, 20, 20],
            Color::White => [250, 250, 250],
            Color::Red => [210, 30, 30],
            Color::Green => [30, 160, 50],
            Color::Blue => [40, 80, 220],
            Color::Yellow => [240, 220, 40],
            Color::Orange => [245, 140, 20],
            Color::Purple => [130, 40, 170],
            Color::Pink => [250, 150, 190],
            Color::Brown => [120, 70, 30],
            Color::Gray => [128, 128, 128],
            Color::Navy => [20, 30, 100],
        }
    }
}

const BACKGROUND: [u8; 3] = [70, 140, 130];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Attributes {
    pub base: Color,
    pub accent: Color,
    pub pattern: Pattern,
    pub shape: Shape,
    pub sleeve: Sleeve,
}

impl Attributes {
    /// Every tuple, in a fixed canonical order.
    pub fn space() -> Vec<Attributes> {
        let mut all = Vec::with_capacity(Self::space_size());
        for &base in Color::ALL {
            for &accent in Color::ALL {
                for &pattern in Pattern::ALL {
                    for &shape in Shape::ALL {
                        for &sleeve in Sleeve::ALL {
                            all.push(Attributes {
                                base,
                                accent,
                                pattern,
                                shape,
                                sleeve,
                            });
                        }
                    }
                }
            }
        }
        all
    }

    pub fn space_size() -> usize {
        Color::ALL.len() * Color::ALL.len() * Pattern::ALL.len() * Shape::ALL.len() * Sleeve::ALL.len()
    }
}

/// Template realization, e.g. "long sleeve striped top in black with red trim".
/// Sleeveless garments omit the sleeve phrase.
pub fn describe(a: &Attributes) -> String {
    let sleeve = match a.sleeve {
        Sleeve::None => String::new(),
        s => format!("{} sleeve ", s.word()),
    };
    format!(
        "{sleeve}{} {} in {} with {} trim",
        a.pattern, a.shape, a.base, a.accent
    )
}

/// Words the templates can emit.
pub fn template_words() -> Vec<&'static str> {
    let mut words: Vec<&'static str> = vec!["sleeve", "in", "with", "trim"];
    words.extend(Color::ALL.iter().map(|c| c.word()));
    words.extend(Pattern::ALL.iter().map(|p| p.word()));
    words.extend(Shape::ALL.iter().map(|s| s.word()));
    words.extend(
        Sleeve::ALL
            .iter()
            .filter(|s| **s != Sleeve::None)
            .map(|s| s.word()),
    );
    words
}

fn to_unit(rgb: [u8; 3]) -> [f64; 3] {
    rgb.map(|v| v as f64 / 255.0)
}

/// Contrasting shade used for stripes and checks: lighter for dark colors,
/// darker for light ones.
fn pattern_shade(rgb: [u8; 3]) -> [u8; 3] {
    let luma = 0.299 * rgb[0] as f64 + 0.587 * rgb[1] as f64 + 0.114 * rgb[2] as f64;
    if luma < 110.0 {
        rgb.map(|v| ((v as u16 + 255) / 2) as u8)
    } else {
        rgb.map(|v| v / 2)
    }
}

/// Draws the garment on a `size × size` canvas. Layout is defined on a
/// 64-unit grid and scaled: accent trim in rows 8..12, sleeves in the side
/// columns 8..20 and 44..56, the body in the center.
pub fn render(a: &Attributes, size: usize) -> Result<Image> {
    if size == 0 || size % 64 != 0 {
        return Err(Error::arg(format!("image size {size} must be a positive multiple of 64")));
    }
    let k = size / 64;
    let mut img = Image::filled(size, size, to_unit(BACKGROUND));
    let base = a.base.rgb();
    let shade = pattern_shade(base);
    let body_color = |r: usize, c: usize| -> [u8; 3] {
        let on = match a.pattern {
            Pattern::Plain => false,
            Pattern::Striped => (r / 4) % 2 == 1,
            Pattern::Checked => (r / 4 + c / 4) % 2 == 1,
        };
        if on {
            shade
        } else {
            base
        }
    };
    let in_body = |r: usize, c: usize| -> bool {
        match a.shape {
            Shape::Top => (12..40).contains(&r) && (20..44).contains(&c),
            Shape::Pants => {
                (12..22).contains(&r) && (20..44).contains(&c)
                    || (22..58).contains(&r) && ((20..30).contains(&c) || (34..44).contains(&c))
            }
            Shape::Dress => {
                // widens by one unit every four rows
                let spread = r.saturating_sub(12) / 4;
                (12..58).contains(&r) && c + spread >= 22 && c < 42 + spread
            }
        }
    };
    let in_trim = |r: usize, c: usize| (8..12).contains(&r) && (20..44).contains(&c);
    let sleeve_rows = match a.sleeve {
        Sleeve::Long => 8..40,
        Sleeve::Short => 8..20,
        Sleeve::None => 0..0,
    };
    let in_sleeve = |r: usize, c: usize| {
        sleeve_rows.contains(&r) && ((8..20).contains(&c) || (44..56).contains(&c))
    };
    for r in 0..size {
        for c in 0..size {
            let (ur, uc) = (r / k, c / k);
            let rgb = if in_trim(ur, uc) {
                Some(a.accent.rgb())
            } else if in_body(ur, uc) || in_sleeve(ur, uc) {
                Some(body_color(ur, uc))
            } else {
                None
            };
            if let Some(rgb) = rgb {
                img.set(r, c, to_unit(rgb));
            }
        }
    }
    Ok(img)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn file_name(self) -> &'static str {
        match self {
            Split::Train => "train.txt",
            Split::Validation => "val.txt",
            Split::Test => "test.txt",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProductRecord {
    pub id: usize,
    pub attributes: Attributes,
    pub description: String,
    pub image: Image,
    pub split: Split,
}

/// Split assignment for `count` products: first 80% train, next 10%
/// validation, remainder test. Ids are assigned to shuffled tuples, so the
/// contiguous split is a random partition of the attribute space.
pub fn split_of(id: usize, count: usize) -> Split {
    let train = count * 8 / 10;
    let val = count / 10;
    if id < train {
        Split::Train
    } else if id < train + val {
        Split::Validation
    } else {
        Split::Test
    }
}

/// `count` products with distinct attribute tuples drawn uniformly.
pub fn generate_dataset(count: usize, image_size: usize, seed: u64) -> Result<Vec<ProductRecord>> {
    if count < 2 {
        return Err(Error::arg("need at least 2 products"));
    }
    let space = Attributes::space_size();
    if count > space {
        return Err(Error::arg(format!(
            "{count} products requested but only {space} distinct attribute tuples exist"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tuples = Attributes::space();
    tuples.shuffle(&mut rng);
    tuples
        .into_iter()
        .take(count)
        .enumerate()
        .map(|(id, attributes)| {
            Ok(ProductRecord {
                id,
                attributes,
                description: describe(&attributes),
                image: render(&attributes, image_size)?,
                split: split_of(id, count),
            })
        })
        .collect()
}

fn products_line(r: &ProductRecord) -> String {
    let a = &r.attributes;
    format!(
        "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
        r.id, a.base, a.accent, a.pattern, a.shape, a.sleeve, r.description
    )
}

/// Writes `products.txt`, `images/<id>.ppm` and the three split id lists.
pub fn write_corpus(dir: &Path, records: &[ProductRecord]) -> Result<()> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let products: String = records.iter().map(products_line).collect();
    let path = dir.join("products.txt");
    fs::write(&path, products).map_err(|e| Error::io(&path, e))?;
    for r in records {
        r.image.save_ppm(&images.join(format!("{}.ppm", r.id)))?;
    }
    for split in [Split::Train, Split::Validation, Split::Test] {
        let ids: String = records
            .iter()
            .filter(|r| r.split == split)
            .map(|r| format!("{}\n", r.id))
            .collect();
        let path = dir.join(split.file_name());
        fs::write(&path, ids).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

fn read_ids(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.trim().parse().map_err(|_| Error::Format {
                what: "split list",
                detail: format!("{}: bad id {l:?}", path.display()),
            })
        })
        .collect()
}

/// Reads a corpus directory written by [`write_corpus`].
pub fn read_corpus(dir: &Path) -> Result<Vec<ProductRecord>> {
    let path = dir.join("products.txt");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut split_by_id = std::collections::HashMap::new();
    for split in [Split::Train, Split::Validation, Split::Test] {
        for id in read_ids(&dir.join(split.file_name()))? {
            if split_by_id.insert(id, split).is_some() {
                return Err(Error::Format {
                    what: "split lists",
                    detail: format!("product {id} listed in more than one split"),
                });
            }
        }
    }
    let mut records = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let bad = |detail: String| Error::Format {
            what: "products.txt",
            detail: format!("line {}: {detail}", n + 1),
        };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 7 {
            return Err(bad(format!("expected 7 fields, got {}", f.len())));
        }
        let id: usize = f[0].parse().map_err(|_| bad("bad id".into()))?;
        let attributes = Attributes {
            base: f[1].parse()?,
            accent: f[2].parse()?,
            pattern: f[3].parse()?,
            shape: f[4].parse()?,
            sleeve: f[5].parse()?,
        };
        let split = *split_by_id
            .get(&id)
            .ok_or_else(|| bad(format!("product {id} is in no split")))?;
        let image = Image::load(&dir.join("images").join(format!("{id}.ppm")))?;
        records.push(ProductRecord {
            id,
            attributes,
            description: f[6].to_string(),
            image,
            split,
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn attrs(base: Color, accent: Color, pattern: Pattern, shape: Shape, sleeve: Sleeve) -> Attributes {
        Attributes {
            base,
            accent,
            pattern,
            shape,
            sleeve,
        }
    }

    #[test]
    fn template_examples() {
        let a = attrs(Color::Black, Color::Red, Pattern::Striped, Shape::Top, Sleeve::Long);
        assert_eq!(describe(&a), "long sleeve striped top in black with red trim");
        let b = Attributes {
            sleeve: Sleeve::None,
            ..a
        };
        assert_eq!(describe(&b), "striped top in black with red trim");
    }

    #[test]
    fn description_is_injective() {
        let space = Attributes::space();
        assert_eq!(space.len(), 12 * 12 * 27);
        let texts: HashSet<String> = space.iter().map(describe).collect();
        assert_eq!(texts.len(), space.len());
    }

    #[test]
    fn images_are_injective() {
        let space = Attributes::space();
        let images: HashSet<Vec<u8>> = space.iter().map(|a| render(a, 64).unwrap().to_ppm()).collect();
        assert_eq!(images.len(), space.len());
    }

    #[test]
    fn refuses_more_products_than_tuples() {
        assert!(generate_dataset(Attributes::space_size() + 1, 64, 0).is_err());
        assert!(generate_dataset(1, 64, 0).is_err());
        assert!(generate_dataset(4, 60, 0).is_err());
    }

    #[test]
    fn generation_is_deterministic_and_split() {
        let a = generate_dataset(50, 64, 7).unwrap();
        let b = generate_dataset(50, 64, 7).unwrap();
        assert_eq!(a, b);
        let distinct: HashSet<_> = a.iter().map(|r| r.attributes).collect();
        assert_eq!(distinct.len(), 50);
        let count = |s| a.iter().filter(|r| r.split == s).count();
        assert_eq!((count(Split::Train), count(Split::Validation), count(Split::Test)), (40, 5, 5));
    }

    #[test]
    fn base_color_changes_garment_patch_statistics() {
        let a = attrs(Color::Red, Color::White, Pattern::Plain, Shape::Top, Sleeve::None);
        let b = Attributes { base: Color::Blue, ..a };
        // Patch (1,1) of a 4x4 grid covers rows/cols 16..32; its thumbnail
        // cell (1,1) (rows/cols 20..24) lies inside the body.
        let features = |img: &Image| {
            let p = &crate::image::split_patches(img, 4).unwrap()[5];
            crate::image::extract_patch_features(p, 4)
        };
        let (fa, fb) = (features(&render(&a, 64).unwrap()), features(&render(&b, 64).unwrap()));
        assert_ne!(fa[..3], fb[..3]);
        let cell = 6 + (4 + 1) * 3;
        let close = |got: &[f64], want: [f64; 3]| got.iter().zip(want).all(|(g, w)| (g - w).abs() < 1e-12);
        assert!(close(&fa[cell..cell + 3], to_unit(Color::Red.rgb())));
        assert!(close(&fb[cell..cell + 3], to_unit(Color::Blue.rgb())));
    }

    #[test]
    fn corpus_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let records = generate_dataset(12, 64, 3).unwrap();
        write_corpus(dir.path(), &records).unwrap();
        assert_eq!(read_corpus(dir.path()).unwrap(), records);
    }
}
