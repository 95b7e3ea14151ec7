//! PASCAL VOC annotation files.
//!
//! VOC boxes are 1-based and inclusive on both ends. Internally boxes are
//! 0-based, min-inclusive and max-exclusive, so `x_min = xmin - 1` and
//! `x_max = xmax`.

use std::fmt::Write as _;

use thiserror::Error;

use super::AnnotatedImage;
use crate::domain::{BoundingBox, DefectClass, LabeledBox};

#[derive(Debug, Error, PartialEq)]
pub enum VocError {
    #[error("malformed XML: {0}")]
    Xml(String),
    #[error("{path}: missing element")]
    Missing { path: String },
    #[error("{path}: {reason}")]
    Invalid { path: String, reason: String },
}

fn child<'a, 'i>(node: roxmltree::Node<'a, 'i>, name: &str) -> Option<roxmltree::Node<'a, 'i>> {
    node.children().find(|c| c.is_element() && c.has_tag_name(name))
}

fn text_of(node: roxmltree::Node<'_, '_>, name: &str, path: &str) -> Result<String, VocError> {
    let path = format!("{path}/{name}");
    let n = child(node, name).ok_or_else(|| VocError::Missing { path: path.clone() })?;
    Ok(n.text().unwrap_or("").trim().to_string())
}

fn number(node: roxmltree::Node<'_, '_>, name: &str, path: &str) -> Result<i64, VocError> {
    let raw = text_of(node, name, path)?;
    let invalid = |reason: String| VocError::Invalid {
        path: format!("{path}/{name}"),
        reason,
    };
    if let Ok(v) = raw.parse::<i64>() {
        return Ok(v);
    }
    // LabelImg and friends sometimes write "12.0"
    match raw.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v.round() as i64),
        _ => Err(invalid(format!("not a number: {raw:?}"))),
    }
}

/// Parse one VOC annotation. Unknown elements are ignored; `image_ref` is
/// taken from `<filename>` (empty when absent).
pub fn parse_voc(xml_text: &str) -> Result<AnnotatedImage, VocError> {
    let doc = roxmltree::Document::parse(xml_text).map_err(|e| VocError::Xml(e.to_string()))?;
    let root = doc.root_element();
    if !root.has_tag_name("annotation") {
        return Err(VocError::Invalid {
            path: root.tag_name().name().to_string(),
            reason: "root element must be <annotation>".into(),
        });
    }
    let filename = child(root, "filename")
        .and_then(|n| n.text())
        .unwrap_or("")
        .trim()
        .to_string();
    let size = child(root, "size").ok_or_else(|| VocError::Missing {
        path: "annotation/size".into(),
    })?;
    let width = number(size, "width", "annotation/size")?;
    let height = number(size, "height", "annotation/size")?;
    if width <= 0 || height <= 0 || width > u32::MAX as i64 || height > u32::MAX as i64 {
        return Err(VocError::Invalid {
            path: "annotation/size".into(),
            reason: format!("bad dimensions {width}x{height}"),
        });
    }
    let (width, height) = (width as u32, height as u32);

    let mut objects = Vec::new();
    for (k, obj) in root
        .children()
        .filter(|c| c.is_element() && c.has_tag_name("object"))
        .enumerate()
    {
        let path = format!("annotation/object[{k}]");
        let name = text_of(obj, "name", &path)?;
        let class = DefectClass::new(name).map_err(|e| VocError::Invalid {
            path: format!("{path}/name"),
            reason: e.to_string(),
        })?;
        let bpath = format!("{path}/bndbox");
        let bnd = child(obj, "bndbox").ok_or_else(|| VocError::Missing { path: bpath.clone() })?;
        let xmin = number(bnd, "xmin", &bpath)?;
        let ymin = number(bnd, "ymin", &bpath)?;
        let xmax = number(bnd, "xmax", &bpath)?;
        let ymax = number(bnd, "ymax", &bpath)?;
        let outside = xmin < 1
            || ymin < 1
            || xmax < xmin
            || ymax < ymin
            || xmax > width as i64
            || ymax > height as i64;
        if outside {
            return Err(VocError::Invalid {
                path: bpath,
                reason: format!(
                    "box ({xmin},{ymin})-({xmax},{ymax}) outside {width}x{height} image"
                ),
            });
        }
        let bbox = BoundingBox {
            x_min: (xmin - 1) as u32,
            y_min: (ymin - 1) as u32,
            x_max: xmax as u32,
            y_max: ymax as u32,
        };
        objects.push(LabeledBox { class, bbox });
    }
    Ok(AnnotatedImage {
        image_ref: filename,
        width,
        height,
        objects,
    })
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

/// Write a VOC annotation with elements in a fixed order.
pub fn write_voc(image: &AnnotatedImage, image_filename: &str) -> String {
    let mut s = String::new();
    s.push_str("<annotation>\n");
    s.push_str("\t<folder>images</folder>\n");
    let _ = writeln!(s, "\t<filename>{}</filename>", escape(image_filename));
    s.push_str("\t<size>\n");
    let _ = writeln!(s, "\t\t<width>{}</width>", image.width);
    let _ = writeln!(s, "\t\t<height>{}</height>", image.height);
    s.push_str("\t\t<depth>3</depth>\n");
    s.push_str("\t</size>\n");
    s.push_str("\t<segmented>0</segmented>\n");
    for o in &image.objects {
        s.push_str("\t<object>\n");
        let _ = writeln!(s, "\t\t<name>{}</name>", escape(o.class.as_str()));
        s.push_str("\t\t<pose>Unspecified</pose>\n");
        s.push_str("\t\t<truncated>0</truncated>\n");
        s.push_str("\t\t<difficult>0</difficult>\n");
        s.push_str("\t\t<bndbox>\n");
        let _ = writeln!(s, "\t\t\t<xmin>{}</xmin>", o.bbox.x_min + 1);
        let _ = writeln!(s, "\t\t\t<ymin>{}</ymin>", o.bbox.y_min + 1);
        let _ = writeln!(s, "\t\t\t<xmax>{}</xmax>", o.bbox.x_max);
        let _ = writeln!(s, "\t\t\t<ymax>{}</ymax>", o.bbox.y_max);
        s.push_str("\t\t</bndbox>\n");
        s.push_str("\t</object>\n");
    }
    s.push_str("</annotation>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const ONE: &str = r#"<annotation>
        <folder>imgs</folder>
        <filename>frame_001.ppm</filename>
        <source><database>Unknown</database></source>
        <size><width>20</width><height>20</height><depth>3</depth></size>
        <object>
            <name>Junction</name>
            <bndbox><xmin>1</xmin><ymin>1</ymin><xmax>10</xmax><ymax>10</ymax></bndbox>
        </object>
    </annotation>"#;

    #[test]
    fn coordinate_convention() {
        let img = parse_voc(ONE).unwrap();
        assert_eq!(img.image_ref, "frame_001.ppm");
        assert_eq!((img.width, img.height), (20, 20));
        assert_eq!(img.objects.len(), 1);
        assert_eq!(img.objects[0].bbox, BoundingBox::new(0, 0, 10, 10).unwrap());
        assert_eq!(img.objects[0].class.as_str(), "Junction");
    }

    #[test]
    fn zero_objects() {
        let xml = "<annotation><size><width>4</width><height>3</height></size></annotation>";
        let img = parse_voc(xml).unwrap();
        assert!(img.objects.is_empty());
        let out = write_voc(&img, "a.ppm");
        assert!(!out.contains("<object>"));
        assert_eq!(parse_voc(&out).unwrap().objects, vec![]);
    }

    #[test]
    fn single_object_written() {
        let img = parse_voc(ONE).unwrap();
        let out = write_voc(&img, "frame_001.ppm");
        assert_eq!(out.matches("<object>").count(), 1);
        assert_eq!(parse_voc(&out).unwrap(), img);
    }

    #[test]
    fn float_coordinates_accepted() {
        let xml = "<annotation><size><width>10</width><height>10</height></size><object><name>a</name>\
                   <bndbox><xmin>2.0</xmin><ymin>3</ymin><xmax>5.0</xmax><ymax>9</ymax></bndbox></object></annotation>";
        assert_eq!(parse_voc(xml).unwrap().objects[0].bbox, BoundingBox::new(1, 2, 5, 9).unwrap());
    }

    #[test]
    fn errors_carry_element_paths() {
        assert!(matches!(parse_voc("<annotation><size>"), Err(VocError::Xml(_))));
        assert_eq!(
            parse_voc("<annotation></annotation>"),
            Err(VocError::Missing { path: "annotation/size".into() })
        );
        let no_box = "<annotation><size><width>4</width><height>4</height></size><object><name>a</name></object></annotation>";
        assert_eq!(
            parse_voc(no_box),
            Err(VocError::Missing { path: "annotation/object[0]/bndbox".into() })
        );
        let outside = ONE.replace("<xmax>10</xmax>", "<xmax>21</xmax>");
        match parse_voc(&outside) {
            Err(VocError::Invalid { path, .. }) => assert_eq!(path, "annotation/object[0]/bndbox"),
            other => panic!("{other:?}"),
        }
        let zero = ONE.replace("<xmin>1</xmin>", "<xmin>0</xmin>");
        assert!(parse_voc(&zero).is_err());
        let missing_y = ONE.replace("<ymax>10</ymax>", "");
        assert_eq!(
            parse_voc(&missing_y),
            Err(VocError::Missing { path: "annotation/object[0]/bndbox/ymax".into() })
        );
    }

    #[test]
    fn escapes_names() {
        let mut img = parse_voc(ONE).unwrap();
        img.objects[0].class = DefectClass::new("a<b & \"c\"").unwrap();
        img.image_ref = "x&y.ppm".into();
        assert_eq!(parse_voc(&write_voc(&img, "x&y.ppm")).unwrap(), img);
    }

    pub(crate) fn arb_image() -> impl Strategy<Value = AnnotatedImage> {
        (1u32..500, 1u32..500).prop_flat_map(|(w, h)| {
            let obj = (0..w, 0..h, 1u32..=w, 1u32..=h, "[A-Za-z][A-Za-z ]{0,12}").prop_map(move |(x, y, bw, bh, name)| {
                let x_max = (x + bw).min(w);
                let y_max = (y + bh).min(h);
                LabeledBox {
                    class: DefectClass::new(name.trim_end().to_string()).unwrap(),
                    bbox: BoundingBox::new(x.min(x_max - 1), y.min(y_max - 1), x_max, y_max).unwrap(),
                }
            });
            (proptest::collection::vec(obj, 0..6), "[a-z0-9_]{1,12}\\.ppm").prop_map(move |(objects, file)| AnnotatedImage {
                image_ref: file,
                width: w,
                height: h,
                objects,
            })
        })
    }

    proptest! {
        #[test]
        fn write_then_parse_is_identity(img in arb_image()) {
            let text = write_voc(&img, &img.image_ref);
            prop_assert_eq!(parse_voc(&text).unwrap(), img);
        }
    }
}
