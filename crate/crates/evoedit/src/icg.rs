//! Instruction-to-caption compiler.
//!
//! Turns a terse edit instruction ("make the car blue") into a caption that
//! describes the edit as something happening over time ("The car's body
//! color gradually shifts to blue, ..."). Classification and slot
//! extraction are plain keyword and pattern rules tuned to the synthetic
//! instruction grammar; there is no language model involved.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthworld::EditTask;

/// Sentence appended by [`refine_caption`].
pub const REFINEMENT_SUFFIX: &str =
    "The video is high-resolution and high-quality, and the overall evolution is temporally coherent.";

/// Ambiguous instructions go to the first matching category in this order.
pub const PRIORITY: [EditTask; 11] = [
    EditTask::TextModification,
    EditTask::MotionChange,
    EditTask::PortraitBeautification,
    EditTask::MaterialModification,
    EditTask::ColorAlteration,
    EditTask::SubjectReplacement,
    EditTask::SubjectRemoval,
    EditTask::SubjectAddition,
    EditTask::BackgroundChange,
    EditTask::StyleTransfer,
    EditTask::ToneTransformation,
];

/// Instructions with a hand-written caption that takes precedence over the
/// templates.
const EXEMPLARS: [(&str, &str); 2] = [
    ("remove the object", "The object gradually fades away while everything else remains still."),
    (
        "change the background to a forest",
        "The background slowly transforms into a dense forest, with all other elements unchanged.",
    ),
];

const COLOR_WORDS: [&str; 16] = [
    "red", "green", "blue", "yellow", "purple", "orange", "cyan", "pink", "black", "white", "gray", "grey",
    "brown", "gold", "silver", "magenta",
];

const MATERIAL_WORDS: [&str; 16] = [
    "leather", "wood", "wooden", "metal", "metallic", "glass", "stone", "marble", "stripes", "striped", "grain",
    "grainy", "matte", "fabric", "velvet", "plastic",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CaptionTemplate {
    pub category: EditTask,
    /// Text with `{slot}` placeholders.
    pub pattern: &'static str,
    pub slots: &'static [&'static str],
}

impl CaptionTemplate {
    /// Fills every placeholder. An empty `location` also drops the space before it.
    pub fn instantiate(&self, values: &[(&str, &str)]) -> String {
        let mut out = self.pattern.to_string();
        for slot in self.slots {
            let v = values.iter().find(|(k, _)| k == slot).map(|(_, v)| *v).unwrap_or("");
            if v.is_empty() {
                out = out.replace(&format!(" {{{slot}}}"), "");
            }
            out = out.replace(&format!("{{{slot}}}"), v);
        }
        out
    }
}

/// One template per category, in [`EditTask::ALL`] order.
pub const TEMPLATES: [CaptionTemplate; 11] = [
    CaptionTemplate {
        category: EditTask::SubjectAddition,
        pattern: "The {entity} gradually appears {location}, while everything else remains still.",
        slots: &["entity", "location"],
    },
    CaptionTemplate {
        category: EditTask::SubjectRemoval,
        pattern: "The {entity} gradually fades away, while everything else remains still.",
        slots: &["entity"],
    },
    CaptionTemplate {
        category: EditTask::SubjectReplacement,
        pattern: "The {entity} gradually turns into {target} in place, while pose, lighting, and surroundings remain unchanged.",
        slots: &["entity", "target"],
    },
    CaptionTemplate {
        category: EditTask::BackgroundChange,
        pattern: "The background slowly transforms into {target} scene, while the main subject and foreground remain unchanged.",
        slots: &["target"],
    },
    CaptionTemplate {
        category: EditTask::ColorAlteration,
        pattern: "The {entity}'s body color gradually shifts to {attribute}, while reflections and all other elements remain consistent.",
        slots: &["entity", "attribute"],
    },
    CaptionTemplate {
        category: EditTask::MaterialModification,
        pattern: "The {entity}'s texture gradually becomes {attribute}, while geometry and the rest of the scene remain unchanged.",
        slots: &["entity", "attribute"],
    },
    CaptionTemplate {
        category: EditTask::TextModification,
        pattern: "The sign's text gradually changes to \"{attribute}\", while layout and surrounding pixels remain unchanged.",
        slots: &["attribute"],
    },
    CaptionTemplate {
        category: EditTask::MotionChange,
        pattern: "The {entity}'s right forearm slowly {verb}, while the rest of the body and scene remain steady.",
        slots: &["entity", "verb"],
    },
    CaptionTemplate {
        category: EditTask::PortraitBeautification,
        pattern: "Facial skin is gently smoothed and eyes brightened over time, while identity and other details remain unchanged.",
        slots: &[],
    },
    CaptionTemplate {
        category: EditTask::StyleTransfer,
        pattern: "The scene gradually adopts a {attribute} style, while composition and content remain unchanged.",
        slots: &["attribute"],
    },
    CaptionTemplate {
        category: EditTask::ToneTransformation,
        pattern: "The image gradually shifts to a {attribute}, while structure and content remain unchanged.",
        slots: &["attribute"],
    },
];

pub fn template(category: EditTask) -> &'static CaptionTemplate {
    &TEMPLATES[category.index()]
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvolutionCaption {
    pub text: String,
    pub category: EditTask,
    pub refined: bool,
    /// Slots could not be read off the instruction and generic fillers were used.
    #[serde(default)]
    pub generic: bool,
}

fn words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

fn has_any(ws: &[String], keys: &[&str]) -> bool {
    ws.iter().any(|w| keys.contains(&w.as_str()))
}

fn has_quoted(text: &str) -> bool {
    let quotes = text.chars().filter(|c| matches!(c, '\'' | '"' | '`' | '“' | '”' | '‘' | '’')).count();
    // An apostrophe in a possessive is a single quote; a quoted word needs two.
    quotes >= 2 && !text.contains("'s ")
}

fn rule_fires(task: EditTask, text: &str, ws: &[String]) -> bool {
    let lower = text.to_lowercase();
    match task {
        EditTask::TextModification => {
            has_any(ws, &["text", "lettering", "word", "wording", "caption"]) || (lower.contains("sign") && has_quoted(text))
        }
        EditTask::MotionChange => has_any(ws, &["hand", "forearm", "arm", "wave", "raises", "lowers"]),
        EditTask::PortraitBeautification => {
            has_any(ws, &["skin", "eyes", "face", "facial", "beautify", "retouch", "wrinkles"])
        }
        EditTask::MaterialModification => {
            has_any(ws, &["texture", "material"])
                || (has_any(ws, &["turn", "make", "change", "convert"]) && has_any(ws, &MATERIAL_WORDS))
        }
        EditTask::ColorAlteration => {
            has_any(ws, &["color", "colour", "recolor", "recolour", "paint"])
                || (has_any(ws, &["make", "turn"]) && ws.last().is_some_and(|w| COLOR_WORDS.contains(&w.as_str())))
        }
        EditTask::SubjectReplacement => {
            has_any(ws, &["replace", "swap", "substitute"]) || lower.contains("turns into") || lower.contains("turn into")
        }
        EditTask::SubjectRemoval => {
            has_any(ws, &["remove", "delete", "erase", "eliminate"]) || lower.contains("fades away") || lower.contains("get rid")
        }
        EditTask::SubjectAddition => has_any(ws, &["add", "insert", "appears", "place", "put"]),
        EditTask::BackgroundChange => has_any(ws, &["background", "backdrop", "scenery"]),
        EditTask::StyleTransfer => has_any(ws, &["style", "stylize", "stylise", "painting", "sketch"]),
        EditTask::ToneTransformation => has_any(
            ws,
            &["grade", "grading", "tone", "toning", "filter", "warmer", "cooler", "brighter", "darker", "lighting", "mood"],
        ),
    }
}

/// Picks the editing category of an instruction (or of a caption produced
/// by [`generate_caption`]).
pub fn classify_instruction(text: &str) -> Result<EditTask> {
    let ws = words(text);
    if ws.is_empty() {
        return Err(Error::InvalidArgument("empty instruction".into()));
    }
    PRIORITY
        .into_iter()
        .find(|&t| rule_fires(t, text, &ws))
        .ok_or_else(|| Error::UnknownCategory(text.to_string()))
}

fn normalize(text: &str) -> String {
    text.trim().trim_end_matches(['.', '!']).trim().to_string()
}

/// Drops a leading article.
fn strip_article(s: &str) -> &str {
    let s = s.trim();
    for a in ["the ", "a ", "an "] {
        if s.len() > a.len() && s[..a.len()].eq_ignore_ascii_case(a) {
            return s[a.len()..].trim_start();
        }
    }
    s
}

/// Text after the first of `verbs` (matched as a whole leading word sequence).
fn after_verb<'a>(text: &'a str, verbs: &[&str]) -> Option<&'a str> {
    let lower = text.to_lowercase();
    verbs.iter().find_map(|v| {
        let pat = format!("{v} ");
        if lower.starts_with(&pat) {
            Some(text[pat.len()..].trim())
        } else {
            lower.find(&format!(" {pat}")).map(|i| text[i + pat.len() + 1..].trim())
        }
    })
}

fn split_once_ci<'a>(text: &'a str, sep: &str) -> Option<(&'a str, &'a str)> {
    let lower = text.to_lowercase();
    lower.find(sep).map(|i| (text[..i].trim(), text[i + sep.len()..].trim()))
}

const LOCATION_WORDS: [&str; 14] = [
    "at", "above", "below", "on", "in", "next", "near", "beside", "behind", "under", "over", "to", "inside", "onto",
];

type Slots = Vec<(&'static str, String)>;

fn extract(task: EditTask, text: &str) -> Result<Slots> {
    let fail = |reason: &str| Error::SlotExtraction {
        task,
        reason: reason.to_string(),
    };
    let nonempty = |s: &str, what: &str| if s.is_empty() { Err(fail(what)) } else { Ok(s.to_string()) };
    Ok(match task {
        EditTask::SubjectAddition => {
            let rest = after_verb(text, &["add", "insert", "put", "place"]).ok_or_else(|| fail("no verb"))?;
            let rest = strip_article(rest);
            let toks: Vec<&str> = rest.split_whitespace().collect();
            let cut = toks
                .iter()
                .position(|w| LOCATION_WORDS.contains(&w.to_lowercase().as_str()))
                .unwrap_or(toks.len());
            vec![
                ("entity", nonempty(&toks[..cut].join(" "), "no entity")?),
                ("location", toks[cut..].join(" ")),
            ]
        }
        EditTask::SubjectRemoval => {
            let rest = after_verb(text, &["remove", "delete", "erase", "eliminate"]).ok_or_else(|| fail("no verb"))?;
            vec![("entity", nonempty(strip_article(rest), "no entity")?)]
        }
        EditTask::SubjectReplacement => {
            let rest = after_verb(text, &["replace", "swap", "substitute"]).ok_or_else(|| fail("no verb"))?;
            let (a, b) = split_once_ci(rest, " with ").ok_or_else(|| fail("no replacement target"))?;
            vec![
                ("entity", nonempty(strip_article(a), "no entity")?),
                ("target", nonempty(b, "no target")?),
            ]
        }
        EditTask::BackgroundChange => {
            let (_, b) = split_once_ci(text, "background to ")
                .or_else(|| split_once_ci(text, "backdrop to "))
                .ok_or_else(|| fail("no target"))?;
            vec![("target", nonempty(b, "no target")?)]
        }
        EditTask::ColorAlteration => {
            let rest = after_verb(text, &["make", "paint", "color", "colour", "recolor", "turn"]).ok_or_else(|| fail("no verb"))?;
            let rest = strip_article(rest);
            let (entity, color) = rest.rsplit_once(' ').ok_or_else(|| fail("no color"))?;
            vec![
                ("entity", nonempty(entity.trim(), "no entity")?),
                ("attribute", nonempty(color.trim(), "no color")?),
            ]
        }
        EditTask::MaterialModification => {
            let rest = after_verb(text, &["turn", "make", "change", "convert"]).ok_or_else(|| fail("no verb"))?;
            let (a, b) = split_once_ci(rest, " into ").ok_or_else(|| fail("no material"))?;
            vec![
                ("entity", nonempty(strip_article(a), "no entity")?),
                ("attribute", nonempty(b, "no material")?),
            ]
        }
        EditTask::TextModification => {
            let (_, b) = split_once_ci(text, " to ").ok_or_else(|| fail("no new text"))?;
            let word = b.trim_matches(|c: char| c.is_whitespace() || "'\"`“”‘’".contains(c));
            vec![("attribute", nonempty(word, "no new text")?)]
        }
        EditTask::MotionChange => {
            let lower = text.to_lowercase();
            let verb = if lower.starts_with("raise") || lower.contains(" raise") || lower.contains("lift") {
                "raises"
            } else if lower.starts_with("lower") || lower.contains(" lower") || lower.contains(" drop") {
                "lowers"
            } else {
                return Err(fail("no motion verb"));
            };
            let rest = after_verb(text, &["raise", "lower", "lift", "drop"]).ok_or_else(|| fail("no verb"))?;
            let (owner, _) = rest.split_once("'s").ok_or_else(|| fail("no possessor"))?;
            vec![("entity", nonempty(strip_article(owner), "no possessor")?), ("verb", verb.to_string())]
        }
        EditTask::PortraitBeautification => Vec::new(),
        EditTask::StyleTransfer => {
            let rest = after_verb(text, &["convert to", "convert", "render in", "make it", "apply"]).unwrap_or(text);
            let rest = strip_article(rest);
            let attr = rest.trim_end_matches(" style").trim_end_matches(" painting").trim();
            vec![("attribute", nonempty(attr, "no style")?)]
        }
        EditTask::ToneTransformation => {
            let rest = after_verb(text, &["apply", "use", "add"]).ok_or_else(|| fail("no verb"))?;
            vec![("attribute", nonempty(strip_article(rest), "no grade")?)]
        }
    })
}

fn generic_slots(task: EditTask) -> Slots {
    let v: &[(&str, &str)] = match task {
        EditTask::SubjectAddition => &[("entity", "object"), ("location", "")],
        EditTask::SubjectRemoval => &[("entity", "object")],
        EditTask::SubjectReplacement => &[("entity", "object"), ("target", "something new")],
        EditTask::BackgroundChange => &[("target", "a new")],
        EditTask::ColorAlteration => &[("entity", "object"), ("attribute", "a new color")],
        EditTask::MaterialModification => &[("entity", "object"), ("attribute", "a new material")],
        EditTask::TextModification => &[("attribute", "the new text")],
        EditTask::MotionChange => &[("entity", "person"), ("verb", "moves")],
        EditTask::PortraitBeautification => &[],
        EditTask::StyleTransfer => &[("attribute", "new")],
        EditTask::ToneTransformation => &[("attribute", "new color grade")],
    };
    v.iter().map(|(k, v)| (*k, v.to_string())).collect()
}

/// Compiles `instruction` into the evolution caption for `category`. When
/// the slots cannot be read off the instruction the template is filled with
/// generic words and `generic` is set.
pub fn generate_caption(instruction: &str, category: EditTask) -> EvolutionCaption {
    let key = normalize(instruction).to_lowercase();
    if let Some((_, text)) = EXEMPLARS.iter().find(|(k, _)| *k == key) {
        if classify_instruction(instruction).ok() == Some(category) {
            return EvolutionCaption {
                text: text.to_string(),
                category,
                refined: false,
                generic: false,
            };
        }
    }
    let (slots, generic) = match extract(category, &normalize(instruction)) {
        Ok(s) => (s, false),
        Err(_) => (generic_slots(category), true),
    };
    let pairs: Vec<(&str, &str)> = slots.iter().map(|(k, v)| (*k, v.as_str())).collect();
    EvolutionCaption {
        text: template(category).instantiate(&pairs),
        category,
        refined: false,
        generic,
    }
}

/// Appends [`REFINEMENT_SUFFIX`]. Refining twice changes nothing.
pub fn refine_caption(caption: &EvolutionCaption) -> Result<EvolutionCaption> {
    let body = caption.text.trim();
    if body.is_empty() {
        return Err(Error::InvalidArgument("cannot refine an empty caption".into()));
    }
    if caption.refined || body.ends_with(REFINEMENT_SUFFIX) {
        let body = body.trim_end_matches(REFINEMENT_SUFFIX).trim();
        if body.is_empty() {
            return Err(Error::InvalidArgument("caption consists of the suffix alone".into()));
        }
        return Ok(EvolutionCaption {
            text: format!("{body} {REFINEMENT_SUFFIX}"),
            refined: true,
            ..caption.clone()
        });
    }
    let mut text = body.to_string();
    if !text.ends_with(['.', '!', '?']) {
        text.push('.');
    }
    Ok(EvolutionCaption {
        text: format!("{text} {REFINEMENT_SUFFIX}"),
        refined: true,
        ..caption.clone()
    })
}

/// Classify, generate and refine in one go.
pub fn compile(instruction: &str) -> Result<EvolutionCaption> {
    let task = classify_instruction(instruction)?;
    refine_caption(&generate_caption(instruction, task))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_template_lists_its_slots() {
        for (t, task) in TEMPLATES.iter().zip(EditTask::ALL) {
            assert_eq!(t.category, task);
            let mut pattern = t.pattern.to_string();
            for s in t.slots {
                let ph = format!("{{{s}}}");
                assert!(pattern.contains(&ph), "{task}: {s}");
                pattern = pattern.replace(&ph, "");
            }
            assert!(!pattern.contains('{'), "{task}: unlisted placeholder");
        }
    }

    #[test]
    fn refinement_is_idempotent() {
        let c = generate_caption("make the car blue", EditTask::ColorAlteration);
        let once = refine_caption(&c).unwrap();
        assert_eq!(refine_caption(&once).unwrap(), once);
        assert_eq!(once.text.matches(REFINEMENT_SUFFIX).count(), 1);
        let bare = EvolutionCaption {
            text: "X".into(),
            ..c.clone()
        };
        assert_eq!(refine_caption(&bare).unwrap().text, format!("X. {REFINEMENT_SUFFIX}"));
        let empty = EvolutionCaption {
            text: "  ".into(),
            ..c
        };
        assert!(refine_caption(&empty).is_err());
    }

    #[test]
    fn unknown_and_empty() {
        assert!(matches!(classify_instruction("frobnicate the widget"), Err(Error::UnknownCategory(_))));
        assert!(classify_instruction("").is_err());
    }

    #[test]
    fn generic_fallback() {
        let c = generate_caption("do something", EditTask::SubjectRemoval);
        assert!(c.generic);
        assert_eq!(c.text, "The object gradually fades away, while everything else remains still.");
    }
}
