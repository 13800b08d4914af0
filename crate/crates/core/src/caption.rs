//! Structured human descriptions and their comma-joined caption form.

use serde::{Deserialize, Serialize};

/// The nine description fields, in caption order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CaptionField {
    Identity,
    Hair,
    AccessoryOnFace,
    AccessoryOnNeck,
    UpperGarment,
    AccessoryOnHands,
    LowerGarment,
    Shoes,
    CarriedItems,
}

impl CaptionField {
    pub const ALL: [CaptionField; 9] = [
        CaptionField::Identity,
        CaptionField::Hair,
        CaptionField::AccessoryOnFace,
        CaptionField::AccessoryOnNeck,
        CaptionField::UpperGarment,
        CaptionField::AccessoryOnHands,
        CaptionField::LowerGarment,
        CaptionField::Shoes,
        CaptionField::CarriedItems,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CaptionField::Identity => "identity",
            CaptionField::Hair => "hair",
            CaptionField::AccessoryOnFace => "accessory on face",
            CaptionField::AccessoryOnNeck => "accessory on neck",
            CaptionField::UpperGarment => "upper garment",
            CaptionField::AccessoryOnHands => "accessory on hands",
            CaptionField::LowerGarment => "lower garment",
            CaptionField::Shoes => "shoes",
            CaptionField::CarriedItems => "carried items",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub identity: Option<String>,
    pub hair: Option<String>,
    pub accessory_on_face: Option<String>,
    pub accessory_on_neck: Option<String>,
    pub upper_garment: Option<String>,
    pub accessory_on_hands: Option<String>,
    pub lower_garment: Option<String>,
    pub shoes: Option<String>,
    pub carried_items: Option<String>,
}

impl CaptionRecord {
    pub fn field(&self, f: CaptionField) -> Option<&str> {
        let v = match f {
            CaptionField::Identity => &self.identity,
            CaptionField::Hair => &self.hair,
            CaptionField::AccessoryOnFace => &self.accessory_on_face,
            CaptionField::AccessoryOnNeck => &self.accessory_on_neck,
            CaptionField::UpperGarment => &self.upper_garment,
            CaptionField::AccessoryOnHands => &self.accessory_on_hands,
            CaptionField::LowerGarment => &self.lower_garment,
            CaptionField::Shoes => &self.shoes,
            CaptionField::CarriedItems => &self.carried_items,
        };
        v.as_deref()
    }

    pub fn field_mut(&mut self, f: CaptionField) -> &mut Option<String> {
        match f {
            CaptionField::Identity => &mut self.identity,
            CaptionField::Hair => &mut self.hair,
            CaptionField::AccessoryOnFace => &mut self.accessory_on_face,
            CaptionField::AccessoryOnNeck => &mut self.accessory_on_neck,
            CaptionField::UpperGarment => &mut self.upper_garment,
            CaptionField::AccessoryOnHands => &mut self.accessory_on_hands,
            CaptionField::LowerGarment => &mut self.lower_garment,
            CaptionField::Shoes => &mut self.shoes,
            CaptionField::CarriedItems => &mut self.carried_items,
        }
    }

    /// Sets a field, normalising whitespace. Empty phrases clear the field.
    pub fn set(&mut self, f: CaptionField, phrase: &str) -> crate::Result<()> {
        if phrase.contains(',') {
            return Err(crate::Error::InvalidArgument(format!(
                "caption field {} contains a comma: {phrase:?}",
                f.name()
            )));
        }
        let norm = phrase.split_whitespace().collect::<Vec<_>>().join(" ");
        *self.field_mut(f) = if norm.is_empty() { None } else { Some(norm) };
        Ok(())
    }

    /// Non-empty fields in schema order.
    pub fn filled(&self) -> impl Iterator<Item = (CaptionField, &str)> {
        CaptionField::ALL
            .into_iter()
            .filter_map(|f| self.field(f).filter(|s| !s.trim().is_empty()).map(|s| (f, s)))
    }

    pub fn is_empty(&self) -> bool {
        self.filled().next().is_none()
    }

    /// Lower-cased whitespace tokens of every field, in schema order.
    pub fn tokens(&self) -> Vec<String> {
        self.filled()
            .flat_map(|(_, s)| s.split_whitespace().map(str::to_lowercase).collect::<Vec<_>>())
            .collect()
    }
}

pub fn serialize_caption(rec: &CaptionRecord) -> String {
    rec.filled().map(|(_, s)| s.trim()).collect::<Vec<_>>().join(", ")
}

/// Outcome of parsing: the record plus any warnings about phrases that were
/// out of order, duplicated or unrecognised.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParsedCaption {
    pub record: CaptionRecord,
    pub warnings: Vec<String>,
}

const UPPER_WORDS: &[&str] = &[
    "sleeve", "shirt", "t-shirt", "top", "jacket", "coat", "sweater", "blouse", "jumpsuit", "dress",
    "hoodie", "vest", "tee",
];
const LOWER_WORDS: &[&str] = &["shorts", "pants", "jeans", "skirt", "trousers", "leggings"];
const SHOE_WORDS: &[&str] = &["sneakers", "boots", "shoes", "sandals", "heels", "loafers", "slippers"];
const PERSON_WORDS: &[&str] = &["woman", "man", "boy", "girl", "person", "child", "lady", "gentleman"];

/// Keyword classifier mapping a phrase to the field it most likely fills.
pub fn classify_phrase(phrase: &str) -> Option<CaptionField> {
    let lower = phrase.to_lowercase();
    let words: Vec<&str> = lower.split_whitespace().collect();
    let has = |list: &[&str]| words.iter().any(|w| list.contains(w));
    let first = words.first().copied().unwrap_or("");
    let last = words.last().copied().unwrap_or("");
    if first == "carrying" || first == "holding" {
        Some(CaptionField::CarriedItems)
    } else if has(&["watch", "bracelet", "gloves", "ring"]) {
        Some(CaptionField::AccessoryOnHands)
    } else if words.iter().any(|w| w.contains("glasses")) || has(&["mask"]) {
        Some(CaptionField::AccessoryOnFace)
    } else if has(&["necklace", "scarf", "tie", "choker"]) {
        Some(CaptionField::AccessoryOnNeck)
    } else if has(&["hair"]) {
        Some(CaptionField::Hair)
    } else if SHOE_WORDS.contains(&last) {
        Some(CaptionField::Shoes)
    } else if LOWER_WORDS.contains(&last) {
        Some(CaptionField::LowerGarment)
    } else if has(UPPER_WORDS) {
        Some(CaptionField::UpperGarment)
    } else if has(PERSON_WORDS) {
        Some(CaptionField::Identity)
    } else {
        None
    }
}

/// Splits on commas and assigns each phrase to a field. Phrases are expected
/// in schema order; anything else is placed on a best-effort basis and
/// reported in `warnings`.
pub fn parse_caption(text: &str) -> ParsedCaption {
    let mut out = ParsedCaption::default();
    let mut last: Option<CaptionField> = None;
    for raw in text.split(',') {
        let phrase = raw.split_whitespace().collect::<Vec<_>>().join(" ");
        if phrase.is_empty() {
            continue;
        }
        let field = match classify_phrase(&phrase) {
            Some(f) => f,
            None => {
                let next = CaptionField::ALL
                    .into_iter()
                    .find(|f| last.is_none_or(|l| *f > l) && out.record.field(*f).is_none());
                match next {
                    Some(f) => {
                        out.warnings
                            .push(format!("unrecognised phrase {phrase:?} placed in {}", f.name()));
                        f
                    }
                    None => {
                        out.warnings.push(format!("unrecognised phrase {phrase:?} dropped"));
                        continue;
                    }
                }
            }
        };
        if out.record.field(field).is_some() {
            out.warnings
                .push(format!("duplicate {} phrase {phrase:?} dropped", field.name()));
            continue;
        }
        if last.is_some_and(|l| field < l) {
            out.warnings.push(format!("phrase {phrase:?} for {} is out of order", field.name()));
        }
        *out.record.field_mut(field) = Some(phrase);
        last = Some(last.map_or(field, |l| l.max(field)));
    }
    for w in &out.warnings {
        log::warn!("{w}");
    }
    out
}

/// Words the synthetic caption generator can emit, and therefore the closed
/// vocabulary of the text embedder.
pub const VOCABULARY: &[&str] = &[
    // identity
    "white", "asian", "black", "young", "old", "woman", "man",
    // hair and hat
    "blond", "brown", "red", "gray", "hair", "with", "hat",
    // colours
    "blue", "green", "yellow", "pink", "purple", "orange", "navy",
    // accessories
    "sunglasses", "necklace", "wearing", "a", "watch", "carrying", "tote", "bag",
    // garments
    "long", "short", "sleeve", "tank", "top", "shorts", "pants", "sneakers", "boots",
];

#[cfg(test)]
mod tests {
    use super::*;

    fn example() -> CaptionRecord {
        CaptionRecord {
            identity: Some("white young woman".into()),
            hair: Some("blond hair".into()),
            accessory_on_face: Some("sunglasses".into()),
            upper_garment: Some("pink long sleeve".into()),
            lower_garment: Some("white shorts".into()),
            shoes: Some("white sneakers".into()),
            carried_items: Some("carrying tote bag".into()),
            ..Default::default()
        }
    }

    #[test]
    fn reference_caption_string() {
        assert_eq!(
            serialize_caption(&example()),
            "white young woman, blond hair, sunglasses, pink long sleeve, white shorts, white sneakers, carrying tote bag"
        );
    }

    #[test]
    fn empty_record_is_empty_string() {
        assert_eq!(serialize_caption(&CaptionRecord::default()), "");
        assert_eq!(parse_caption("").record, CaptionRecord::default());
    }

    #[test]
    fn parse_inverts_serialize() {
        let p = parse_caption(&serialize_caption(&example()));
        assert_eq!(p.record, example());
        assert!(p.warnings.is_empty());
    }

    #[test]
    fn out_of_order_is_best_effort() {
        let p = parse_caption("white sneakers, white young woman");
        assert_eq!(p.record.shoes.as_deref(), Some("white sneakers"));
        assert_eq!(p.record.identity.as_deref(), Some("white young woman"));
        assert_eq!(p.warnings.len(), 1);
    }

    #[test]
    fn commas_are_rejected_in_fields() {
        let mut r = CaptionRecord::default();
        assert!(r.set(CaptionField::Hair, "red, hair").is_err());
        r.set(CaptionField::Hair, "  red   hair ").unwrap();
        assert_eq!(r.hair.as_deref(), Some("red hair"));
    }

    #[test]
    fn vocabulary_has_no_duplicates() {
        let mut v = VOCABULARY.to_vec();
        v.sort();
        v.dedup();
        assert_eq!(v.len(), VOCABULARY.len());
    }
}
