//! Prompt templates for the parser and VLM roles.
//!
//! Templates live in `prompts/*.txt` and carry `{name}` placeholders. Literal
//! braces in the templates (JSON examples) are left untouched; only the named
//! placeholders of each template are substituted, in a single pass, so that
//! substituted values are never re-expanded.

pub const CATEGORY_PARSING: &str = include_str!("../prompts/category_parsing.txt");
pub const PRESENCE_CHECK: &str = include_str!("../prompts/presence_check.txt");
pub const POINT_PROMPT: &str = include_str!("../prompts/point_prompt.txt");
pub const VERIFY_POINTS: &str = include_str!("../prompts/verify_points.txt");
pub const CHOOSE_IMAGE: &str = include_str!("../prompts/choose_image.txt");
pub const IMAGE_ID_INVALID: &str = include_str!("../prompts/image_id_invalid.txt");
pub const WRONG_FORMAT: &str = include_str!("../prompts/wrong_format.txt");
pub const REFLECTION: &str = include_str!("../prompts/reflection.txt");

/// Single-pass substitution of `{key}` placeholders.
pub fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + 64);
    let mut rest = template;
    'scan: while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        for (key, value) in vars {
            if let Some(tail) = after.strip_prefix(key).and_then(|t| t.strip_prefix('}')) {
                out.push_str(value);
                rest = tail;
                continue 'scan;
            }
        }
        out.push('{');
        rest = after;
    }
    out.push_str(rest);
    out
}

/// Category list as a JSON array of strings.
pub fn format_category_list(categories: &[String]) -> String {
    serde_json::to_string(categories).expect("string list serializes")
}

pub fn category_parsing(query: &str, categories: &[String]) -> String {
    let list = format_category_list(categories);
    render(CATEGORY_PARSING, &[("query", query), ("obj_list", &list)])
}

pub fn presence_check(query: &str, anchors: &str) -> String {
    render(
        PRESENCE_CHECK,
        &[("query", query), ("object_ids_description", anchors)],
    )
}

pub fn point_prompt(query: &str, anchors: &str) -> String {
    render(
        POINT_PROMPT,
        &[("query", query), ("object_ids_description", anchors)],
    )
}

pub fn verify_points(query: &str, anchors: &str) -> String {
    render(
        VERIFY_POINTS,
        &[("query", query), ("object_ids_description", anchors)],
    )
}

pub fn choose_image(query: &str, n_images: usize) -> String {
    let n = n_images.to_string();
    render(CHOOSE_IMAGE, &[("query", query), ("n_images", &n)])
}

pub fn image_id_invalid(image_id: i64) -> String {
    let id = image_id.to_string();
    render(IMAGE_ID_INVALID, &[("images_id", &id)])
}

pub fn wrong_format() -> String {
    WRONG_FORMAT.to_string()
}

pub fn reflection() -> String {
    REFLECTION.to_string()
}
