//! Caption grammar.
//!
//! ```text
//! one <color> <shape>
//! two|three|four <color> <shapes>          (all objects identical)
//! a <color> <shape> left of a <color> <shape>
//! a <color> <shape> above a <color> <shape>
//! a <color> <shape> and a <color> <shape> [and ...]
//! ```
//!
//! Objects are always listed in cell order, so the first object of a relation
//! is the left (or upper) one.

use crate::error::{Error, Result};
use crate::shapeworld::scene::{
    Color, ObjectSpec, Relation, SceneConstraints, SceneDescription, Shape, COLORS, SHAPES,
};

/// Every word the grammar can emit, in a fixed order (token ids are indices).
pub const VOCABULARY: [&str; 19] = [
    "a", "and", "one", "two", "three", "four", "left", "of", "above", "red", "green", "blue",
    "yellow", "circle", "square", "triangle", "circles", "squares", "triangles",
];

const NUMBERS: [&str; 4] = ["one", "two", "three", "four"];

fn describe(spec: ObjectSpec) -> String {
    format!("a {} {}", spec.color.word(), spec.shape.word())
}

/// The constraint set a scene's caption pins down.
pub fn scene_constraints(scene: &SceneDescription) -> SceneConstraints {
    let objects = scene.objects();
    let relation = match objects {
        [a, b] if a.spec() != b.spec() => Relation::of(a.cell, b.cell),
        _ => None,
    };
    SceneConstraints {
        count: Some(objects.len()),
        required: objects.iter().map(|o| o.spec()).collect(),
        relation,
    }
}

/// Renders constraints as text. Every constraint set produced by
/// [`scene_constraints`] has a caption.
pub fn caption_constraints(c: &SceneConstraints) -> Result<String> {
    let n = c.count.unwrap_or(c.required.len());
    if n != c.required.len() {
        return Err(Error::Config(format!(
            "cannot caption count {n} with {} listed objects",
            c.required.len()
        )));
    }
    let req = &c.required;
    if req.is_empty() {
        return Ok(String::new());
    }
    let identical = req.iter().all(|s| *s == req[0]);
    if identical && c.relation.is_none() {
        let s = req[0];
        return Ok(if n == 1 {
            format!("one {} {}", s.color.word(), s.shape.word())
        } else {
            format!("{} {} {}", NUMBERS[n - 1], s.color.word(), s.shape.plural())
        });
    }
    if let Some(rel) = c.relation {
        if n != 2 {
            return Err(Error::Config("relations are only captioned for two objects".into()));
        }
        let word = match rel {
            Relation::LeftOf => "left of",
            Relation::Above => "above",
        };
        return Ok(format!("{} {} {}", describe(req[0]), word, describe(req[1])));
    }
    Ok(req.iter().map(|&s| describe(s)).collect::<Vec<_>>().join(" and "))
}

pub fn caption_scene(scene: &SceneDescription) -> String {
    caption_constraints(&scene_constraints(scene)).expect("scene constraints always caption")
}

fn parse_color(w: &str) -> Option<Color> {
    COLORS.into_iter().find(|c| c.word() == w)
}

fn parse_shape(w: &str, plural: bool) -> Option<Shape> {
    SHAPES
        .into_iter()
        .find(|s| if plural { s.plural() == w } else { s.word() == w })
}

/// Inverse of [`caption_constraints`].
pub fn parse_caption(caption: &str) -> Result<SceneConstraints> {
    let words: Vec<&str> = caption.split_whitespace().collect();
    let bad = || Error::Config(format!("caption `{caption}` is not in the grammar"));
    if words.is_empty() {
        return Ok(SceneConstraints {
            count: Some(0),
            ..SceneConstraints::default()
        });
    }
    if let Some(n) = NUMBERS.iter().position(|&w| w == words[0]) {
        let n = n + 1;
        if words.len() != 3 {
            return Err(bad());
        }
        let color = parse_color(words[1]).ok_or_else(bad)?;
        let shape = parse_shape(words[2], n > 1).ok_or_else(bad)?;
        return Ok(SceneConstraints {
            count: Some(n),
            required: vec![ObjectSpec { color, shape }; n],
            relation: None,
        });
    }

    // "a <color> <shape>" items joined by "and", "left of", or "above"
    let mut required = Vec::new();
    let mut relation = None;
    let mut i = 0;
    loop {
        if words.get(i) != Some(&"a") {
            return Err(bad());
        }
        let color = words.get(i + 1).and_then(|w| parse_color(w)).ok_or_else(bad)?;
        let shape = words.get(i + 2).and_then(|w| parse_shape(w, false)).ok_or_else(bad)?;
        required.push(ObjectSpec { color, shape });
        i += 3;
        match words.get(i) {
            None => break,
            Some(&"and") if relation.is_none() => i += 1,
            Some(&"left") if required.len() == 1 && words.get(i + 1) == Some(&"of") => {
                relation = Some(Relation::LeftOf);
                i += 2;
            }
            Some(&"above") if required.len() == 1 => {
                relation = Some(Relation::Above);
                i += 1;
            }
            _ => return Err(bad()),
        }
    }
    if relation.is_some() && required.len() != 2 {
        return Err(bad());
    }
    if required.len() > 4 {
        return Err(bad());
    }
    Ok(SceneConstraints {
        count: Some(required.len()),
        required,
        relation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shapeworld::scene::{Cell, Object};

    fn obj(color: Color, shape: Shape, cell: usize) -> Object {
        Object {
            shape,
            color,
            cell: Cell::new(cell).unwrap(),
        }
    }

    #[test]
    fn templates() {
        let s = SceneDescription::new(vec![obj(Color::Red, Shape::Circle, 2)]).unwrap();
        assert_eq!(caption_scene(&s), "one red circle");
        let s = SceneDescription::new(vec![
            obj(Color::Green, Shape::Triangle, 1),
            obj(Color::Blue, Shape::Square, 0),
        ])
        .unwrap();
        assert_eq!(caption_scene(&s), "a blue square left of a green triangle");
        let s = SceneDescription::new(vec![
            obj(Color::Yellow, Shape::Triangle, 0),
            obj(Color::Yellow, Shape::Triangle, 3),
        ])
        .unwrap();
        assert_eq!(caption_scene(&s), "two yellow triangles");
        let s = SceneDescription::new(vec![
            obj(Color::Red, Shape::Circle, 1),
            obj(Color::Blue, Shape::Circle, 2),
        ])
        .unwrap();
        assert_eq!(caption_scene(&s), "a red circle above a blue circle");
        let s = SceneDescription::new(vec![
            obj(Color::Red, Shape::Circle, 0),
            obj(Color::Red, Shape::Circle, 1),
            obj(Color::Blue, Shape::Square, 3),
        ])
        .unwrap();
        assert_eq!(
            caption_scene(&s),
            "a red circle and a red circle and a blue square"
        );
        assert_eq!(caption_scene(&SceneDescription::empty()), "");
    }

    #[test]
    fn round_trip_over_every_scene() {
        for s in SceneDescription::enumerate(4) {
            let cap = caption_scene(&s);
            let parsed = parse_caption(&cap).unwrap();
            assert_eq!(parsed, scene_constraints(&s), "{cap}");
            assert!(parsed.satisfied_by(s.objects()));
            for w in cap.split_whitespace() {
                assert!(VOCABULARY.contains(&w), "{w}");
            }
        }
    }

    #[test]
    fn rejects_out_of_grammar() {
        for c in ["one red", "two red circle", "a red circle left a blue square", "purple circle", "a red circle above a red square above a blue circle"] {
            assert!(parse_caption(c).is_err(), "{c}");
        }
    }
}
