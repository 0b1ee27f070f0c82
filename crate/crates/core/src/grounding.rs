//! Grounding coordinate formats.
//!
//! * XML points: `<points x1="10.5" y1="20.0" alt="cat">cat</points>`, values in
//!   `[0, 100]` with exactly one decimal.
//! * Point tokens: `<|point_start|>(105, 200)<|point_end|>`, integers in `[0, 1000]`.
//! * Boxes: `<|box_start|>[x1, y1, x2, y2]<|box_end|>`, integers in `[0, 1000]`.
//!
//! Both scales are stored as integers (tenths of a percent, or permille), so
//! converting between them is a relabeling of the same integer: the decimal
//! point moves between the second and third digit.

use serde::{Deserialize, Serialize};

use crate::geometry::PatchGrid;
use crate::{Error, Result};

pub const MAX_UNITS: u16 = 1000;

const POINT_START: &str = "<|point_start|>";
const POINT_END: &str = "<|point_end|>";
const BOX_START: &str = "<|box_start|>";
const BOX_END: &str = "<|box_end|>";
const REF_START: &str = "<|object_ref_start|>";
const REF_END: &str = "<|object_ref_end|>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scale {
    /// `0.0..=100.0`, one decimal; stored in tenths.
    Percent100,
    /// `0..=1000` integers.
    Permille1000,
}

impl Scale {
    pub fn other(self) -> Scale {
        match self {
            Scale::Percent100 => Scale::Permille1000,
            Scale::Permille1000 => Scale::Percent100,
        }
    }

    /// Real-valued coordinate for a stored integer.
    pub fn value(self, units: u16) -> f64 {
        match self {
            Scale::Percent100 => units as f64 / 10.0,
            Scale::Permille1000 => units as f64,
        }
    }

    fn full(self) -> f64 {
        match self {
            Scale::Percent100 => 100.0,
            Scale::Permille1000 => 1000.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Point {
    pub x: u16,
    pub y: u16,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PointSet {
    pub points: Vec<Point>,
    pub scale: Scale,
    pub label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x1: u16,
    pub y1: u16,
    pub x2: u16,
    pub y2: u16,
    pub label: Option<String>,
}

fn err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Grounding(msg.into()))
}

impl PointSet {
    /// Builds a percent-scale set from real values; each must have one decimal.
    pub fn from_percent(points: &[(f64, f64)], label: Option<&str>) -> Result<Self> {
        let conv = |v: f64| -> Result<u16> {
            let units = (v * 10.0).round();
            if !(0.0..=MAX_UNITS as f64).contains(&units) || (units - v * 10.0).abs() > 1e-6 {
                return err(format!("{v} is not a one-decimal value in [0, 100]"));
            }
            Ok(units as u16)
        };
        let points = points
            .iter()
            .map(|&(x, y)| Ok(Point { x: conv(x)?, y: conv(y)? }))
            .collect::<Result<_>>()?;
        Ok(PointSet {
            points,
            scale: Scale::Percent100,
            label: label.map(str::to_string),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.iter().any(|p| p.x > MAX_UNITS || p.y > MAX_UNITS) {
            return err("coordinate out of range");
        }
        Ok(())
    }
}

/// Switches to the other scale; `10.5 <-> 105`.
pub fn convert_scale(ps: &PointSet) -> PointSet {
    PointSet {
        scale: ps.scale.other(),
        ..ps.clone()
    }
}

/// Maps a coordinate to pixels of `image`, clamped to its bounds.
pub fn to_pixels(point: Point, scale: Scale, image: &PatchGrid) -> (f64, f64) {
    let (w, h) = (image.width_px() as f64, image.height_px() as f64);
    let x = scale.value(point.x) / scale.full() * w;
    let y = scale.value(point.y) / scale.full() * h;
    (x.clamp(0.0, w), y.clamp(0.0, h))
}

/// Minimal cursor over the input with exact-match helpers.
struct Cursor<'a> {
    s: &'a str,
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(s: &'a str) -> Self {
        Cursor { s, pos: 0 }
    }

    fn rest(&self) -> &'a str {
        &self.s[self.pos..]
    }

    fn eat(&mut self, lit: &str) -> bool {
        if self.rest().starts_with(lit) {
            self.pos += lit.len();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, lit: &str) -> Result<()> {
        if self.eat(lit) {
            Ok(())
        } else {
            err(format!("expected `{lit}` at byte {}", self.pos))
        }
    }

    fn until(&mut self, lit: &str) -> Result<&'a str> {
        match self.rest().find(lit) {
            Some(k) => {
                let out = &self.rest()[..k];
                self.pos += k + lit.len();
                Ok(out)
            }
            None => err(format!("missing `{lit}`")),
        }
    }

    fn digits(&mut self) -> &'a str {
        let n = self.rest().bytes().take_while(u8::is_ascii_digit).count();
        let out = &self.rest()[..n];
        self.pos += n;
        out
    }

    /// Integer without leading zeros in `0..=1000`.
    fn permille(&mut self) -> Result<u16> {
        let d = self.digits();
        if d.is_empty() || (d.len() > 1 && d.starts_with('0')) || d.len() > 4 {
            return err(format!("bad integer `{d}`"));
        }
        let v: u16 = d.parse().unwrap();
        if v > MAX_UNITS {
            return err(format!("{v} out of range [0, 1000]"));
        }
        Ok(v)
    }

    /// `", "` or `","`.
    fn comma(&mut self) -> Result<()> {
        self.expect(",")?;
        self.eat(" ");
        Ok(())
    }

    fn done(&self) -> Result<()> {
        if self.pos == self.s.len() {
            Ok(())
        } else {
            err(format!("trailing input at byte {}", self.pos))
        }
    }
}

/// Parses `D.D`, `DD.D` or `100.0` into tenths.
fn parse_percent(s: &str) -> Result<u16> {
    let Some((int, frac)) = s.split_once('.') else {
        return err(format!("`{s}` lacks one decimal place"));
    };
    let ok_int = !int.is_empty() && int.len() <= 3 && int.bytes().all(|b| b.is_ascii_digit()) && (int.len() == 1 || !int.starts_with('0'));
    if !ok_int || frac.len() != 1 || !frac.as_bytes()[0].is_ascii_digit() {
        return err(format!("malformed coordinate `{s}`"));
    }
    let units = int.parse::<u16>().unwrap() * 10 + frac.parse::<u16>().unwrap();
    if units > MAX_UNITS {
        return err(format!("{s} out of range [0, 100]"));
    }
    Ok(units)
}

fn format_percent(units: u16) -> String {
    format!("{}.{}", units / 10, units % 10)
}

fn xml_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            c => out.push(c),
        }
    }
    out
}

fn xml_unescape(s: &str) -> Result<String> {
    if s.contains(['<', '>', '"']) {
        return err("unescaped markup character in label");
    }
    let mut out = String::with_capacity(s.len());
    let mut rest = s;
    while let Some(k) = rest.find('&') {
        out.push_str(&rest[..k]);
        rest = &rest[k..];
        let (rep, len) = [("&amp;", '&'), ("&lt;", '<'), ("&gt;", '>'), ("&quot;", '"')]
            .iter()
            .find(|(e, _)| rest.starts_with(e))
            .map(|(e, c)| (*c, e.len()))
            .ok_or_else(|| Error::Grounding("unknown entity in label".into()))?;
        out.push(rep);
        rest = &rest[len..];
    }
    out.push_str(rest);
    Ok(out)
}

/// Parses one `<points .. alt="..">..</points>` element (Percent100 scale).
pub fn parse_xml_points(text: &str) -> Result<PointSet> {
    let mut c = Cursor::new(text);
    c.expect("<points")?;
    let mut attrs: Vec<(&str, &str)> = Vec::new();
    while c.eat(" ") {
        let name = c.until("=\"")?;
        if name.is_empty() || !name.bytes().all(|b| b.is_ascii_alphanumeric()) {
            return err(format!("bad attribute name `{name}`"));
        }
        attrs.push((name, c.until("\"")?));
    }
    c.expect(">")?;
    let body = c.until("</points>")?;
    c.done()?;

    let Some((&("alt", alt), coords)) = attrs.split_last() else {
        return err("`alt` must be the last attribute");
    };
    if coords.is_empty() {
        return err("no points");
    }
    let mut points = Vec::with_capacity(coords.len() / 2);
    for (k, pair) in coords.chunks(2).enumerate() {
        let i = k + 1;
        let (xn, xv) = pair[0];
        if xn != format!("x{i}") {
            return err(format!("expected x{i}, found {xn}"));
        }
        let Some(&(yn, yv)) = pair.get(1) else {
            return err(format!("x{i} has no paired y{i}"));
        };
        if yn != format!("y{i}") {
            return err(format!("x{i} has no paired y{i} (found {yn})"));
        }
        points.push(Point {
            x: parse_percent(xv)?,
            y: parse_percent(yv)?,
        });
    }
    let alt = xml_unescape(alt)?;
    if xml_unescape(body)? != alt {
        return err("alt text and element body differ");
    }
    Ok(PointSet {
        points,
        scale: Scale::Percent100,
        label: Some(alt),
    })
}

pub fn render_xml_points(ps: &PointSet) -> Result<String> {
    ps.validate()?;
    if ps.scale != Scale::Percent100 {
        return err("xml points use the Percent100 scale");
    }
    if ps.points.is_empty() {
        return err("xml points need at least one point");
    }
    let label = xml_escape(ps.label.as_deref().unwrap_or(""));
    let mut s = String::from("<points");
    for (k, p) in ps.points.iter().enumerate() {
        s.push_str(&format!(" x{0}=\"{1}\" y{0}=\"{2}\"", k + 1, format_percent(p.x), format_percent(p.y)));
    }
    s.push_str(&format!(" alt=\"{label}\">{label}</points>"));
    Ok(s)
}

fn check_label(label: &str) -> Result<()> {
    if label.contains("<|") || label.contains("|>") {
        return err("label contains special-token markup");
    }
    Ok(())
}

fn parse_object_ref(c: &mut Cursor) -> Result<Option<String>> {
    if c.eat(REF_START) {
        let label = c.until(REF_END)?;
        check_label(label)?;
        Ok(Some(label.to_string()))
    } else {
        Ok(None)
    }
}

fn render_object_ref(label: &Option<String>) -> Result<String> {
    match label {
        Some(l) => {
            check_label(l)?;
            Ok(format!("{REF_START}{l}{REF_END}"))
        }
        None => Ok(String::new()),
    }
}

/// Renders point tokens, prefixed by an object reference when labelled.
pub fn render_point_tokens(ps: &PointSet) -> Result<String> {
    ps.validate()?;
    if ps.scale != Scale::Permille1000 {
        return err("point tokens use the Permille1000 scale");
    }
    let mut s = render_object_ref(&ps.label)?;
    for p in &ps.points {
        s.push_str(&format!("{POINT_START}({}, {}){POINT_END}", p.x, p.y));
    }
    Ok(s)
}

pub fn parse_point_tokens(text: &str) -> Result<PointSet> {
    let mut c = Cursor::new(text);
    let label = parse_object_ref(&mut c)?;
    let mut points = Vec::new();
    while c.eat(POINT_START) {
        c.expect("(")?;
        let x = c.permille()?;
        c.comma()?;
        let y = c.permille()?;
        c.expect(")")?;
        c.expect(POINT_END)?;
        points.push(Point { x, y });
    }
    c.done()?;
    Ok(PointSet {
        points,
        scale: Scale::Permille1000,
        label,
    })
}

/// Parses a box in token form, optionally after an object reference, or a bare `[x1, y1, x2, y2]` list.
pub fn parse_box(text: &str) -> Result<BoundingBox> {
    let mut c = Cursor::new(text);
    let label = parse_object_ref(&mut c)?;
    let wrapped = c.eat(BOX_START);
    c.expect("[")?;
    let x1 = c.permille()?;
    c.comma()?;
    let y1 = c.permille()?;
    c.comma()?;
    let x2 = c.permille()?;
    c.comma()?;
    let y2 = c.permille()?;
    c.expect("]")?;
    if wrapped {
        c.expect(BOX_END)?;
    } else if label.is_some() {
        return err("object reference must be followed by a box token");
    }
    c.done()?;
    if x1 > x2 || y1 > y2 {
        return err(format!("corner order violated: [{x1}, {y1}, {x2}, {y2}]"));
    }
    Ok(BoundingBox { x1, y1, x2, y2, label })
}

pub fn render_box(b: &BoundingBox) -> Result<String> {
    if [b.x1, b.y1, b.x2, b.y2].iter().any(|&v| v > MAX_UNITS) {
        return err("coordinate out of range");
    }
    if b.x1 > b.x2 || b.y1 > b.y2 {
        return err("corner order violated");
    }
    Ok(format!(
        "{}{BOX_START}[{}, {}, {}, {}]{BOX_END}",
        render_object_ref(&b.label)?,
        b.x1,
        b.y1,
        b.x2,
        b.y2
    ))
}
