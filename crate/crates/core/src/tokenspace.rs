//! Token vocabulary, action codecs and the interleaved dialogue format.
//!
//! The vocabulary is closed: it is built once from `resources/templates.txt`
//! with a whitespace tokenizer that splits edge punctuation into separate
//! tokens. Observation patches are not vocabulary words; they share a single
//! reserved id and carry their geometry in [`TokenRole::ObservationPatch`].

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::LazyLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

const TEMPLATES: &str = include_str!("../resources/templates.txt");

/// Rotation applied by a single turn action.
pub const TURN_DEGREES: f64 = 15.0;
/// Translation applied by a single forward action.
pub const FORWARD_METERS: f64 = 0.25;
/// Actions generated per dialogue turn.
pub const ACTIONS_PER_TURN: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    TurnLeft,
    TurnRight,
    MoveForward,
    Stop,
}

impl Action {
    pub const ALL: [Action; 4] = [
        Action::TurnLeft,
        Action::TurnRight,
        Action::MoveForward,
        Action::Stop,
    ];

    fn index(self) -> usize {
        match self {
            Action::TurnLeft => 0,
            Action::TurnRight => 1,
            Action::MoveForward => 2,
            Action::Stop => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TokenId(pub u32);

impl TokenId {
    pub const UNKNOWN: TokenId = TokenId(0);
    /// Shared id of every observation-patch token.
    pub const PATCH: TokenId = TokenId(1);
    pub const IMAGE_SLOT: TokenId = TokenId(2);
    pub const MEMORY_SLOT: TokenId = TokenId(3);

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// One visual token: the patch at grid cell `(patch_x, patch_y)` of frame `frame_t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchToken {
    pub frame_t: u32,
    pub patch_x: u16,
    pub patch_y: u16,
    /// Patch-center depth in meters, `-1.0` when invalid.
    pub depth: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TokenRole {
    Prompt,
    ObservationPatch(PatchToken),
    ActionTok,
    MemoryTok,
}

impl TokenRole {
    pub fn patch(&self) -> Option<&PatchToken> {
        match self {
            TokenRole::ObservationPatch(p) => Some(p),
            _ => None,
        }
    }

    pub fn is_observation(&self) -> bool {
        matches!(self, TokenRole::ObservationPatch(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Token {
    pub id: TokenId,
    pub role: TokenRole,
}

impl Token {
    pub fn prompt(id: TokenId) -> Self {
        Token { id, role: TokenRole::Prompt }
    }

    pub fn action(id: TokenId) -> Self {
        Token { id, role: TokenRole::ActionTok }
    }

    pub fn patch(patch: PatchToken) -> Self {
        Token { id: TokenId::PATCH, role: TokenRole::ObservationPatch(patch) }
    }

    pub fn memory_slot() -> Self {
        Token { id: TokenId::MEMORY_SLOT, role: TokenRole::MemoryTok }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ActionScheme {
    /// Arrow symbols plus a stop word, one token per action.
    SymbolicSingle,
    /// Upper-case words, one token per action.
    WordSingle,
    /// Short natural-language commands, several tokens per action.
    NaturalPhrase,
}

impl ActionScheme {
    pub const ALL: [ActionScheme; 3] = [
        ActionScheme::SymbolicSingle,
        ActionScheme::WordSingle,
        ActionScheme::NaturalPhrase,
    ];

    fn index(self) -> usize {
        match self {
            ActionScheme::SymbolicSingle => 0,
            ActionScheme::WordSingle => 1,
            ActionScheme::NaturalPhrase => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ActionScheme::SymbolicSingle => "symbolic",
            ActionScheme::WordSingle => "word",
            ActionScheme::NaturalPhrase => "phrase",
        }
    }
}

impl fmt::Display for ActionScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ActionScheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "symbolic" => Ok(ActionScheme::SymbolicSingle),
            "word" => Ok(ActionScheme::WordSingle),
            "phrase" => Ok(ActionScheme::NaturalPhrase),
            other => Err(format!("unknown action scheme `{other}` (expected symbolic, word or phrase)")),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum TokenError {
    #[error("token at index {index} ({id:?}) is not in the {scheme} action vocabulary")]
    UnknownToken { index: usize, id: TokenId, scheme: ActionScheme },
    #[error("token list ends in the middle of a {scheme} action phrase")]
    IncompletePhrase { scheme: ActionScheme },
}

const PUNCT_LEAD: &[char] = &['('];
const PUNCT_TRAIL: &[char] = &['.', ',', ':', ';', ')'];

/// Splits on whitespace and peels leading/trailing punctuation into their own tokens.
pub fn split_words(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    for raw in text.split_whitespace() {
        let mut word = raw;
        while let Some(c) = word.chars().next().filter(|c| PUNCT_LEAD.contains(c)) {
            out.push(&word[..c.len_utf8()]);
            word = &word[c.len_utf8()..];
        }
        let mut trailing = Vec::new();
        while let Some(c) = word.chars().next_back().filter(|c| PUNCT_TRAIL.contains(c)) {
            let cut = word.len() - c.len_utf8();
            trailing.push(&word[cut..]);
            word = &word[..cut];
        }
        if !word.is_empty() {
            out.push(word);
        }
        out.extend(trailing.into_iter().rev());
    }
    out
}

#[derive(Debug)]
struct Templates {
    system: String,
    memory: String,
    turn_phrases: Vec<String>,
    actions: [[String; 4]; 3],
    instruction_words: String,
}

impl Templates {
    fn parse(src: &str) -> Templates {
        let mut entries = HashMap::new();
        for line in src.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').expect("template line without `=`");
            entries.insert(key.trim().to_owned(), value.trim().to_owned());
        }
        let get = |key: &str| entries.get(key).cloned().unwrap_or_else(|| panic!("missing template `{key}`"));
        let list = |key: &str| get(key).split('|').map(|s| s.trim().to_owned()).collect::<Vec<_>>();
        let four = |key: &str| -> [String; 4] {
            list(key).try_into().unwrap_or_else(|_| panic!("`{key}` must list exactly four actions"))
        };
        Templates {
            system: get("system"),
            memory: get("memory"),
            turn_phrases: list("turn_phrases"),
            actions: [four("actions.symbolic"), four("actions.word"), four("actions.phrase")],
            instruction_words: get("instruction_words"),
        }
    }
}

/// The closed word vocabulary plus the per-scheme action phrases.
#[derive(Debug)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, TokenId>,
    templates: Templates,
    phrase_ids: Vec<TokenId>,
    action_ids: [[Vec<TokenId>; 4]; 3],
}

static VOCAB: LazyLock<Vocab> = LazyLock::new(|| Vocab::build(TEMPLATES));

/// The process-wide vocabulary.
pub fn vocab() -> &'static Vocab {
    &VOCAB
}

impl Vocab {
    fn build(src: &str) -> Vocab {
        let templates = Templates::parse(src);
        let mut vocab = Vocab {
            words: Vec::new(),
            index: HashMap::new(),
            phrase_ids: Vec::new(),
            action_ids: Default::default(),
            templates,
        };
        for special in ["<unk>", "<patch>", "<image>", "<memory>"] {
            vocab.intern(special);
        }
        // Turn phrases are single opaque entries so every turn prefix has the same length.
        let phrases = vocab.templates.turn_phrases.clone();
        vocab.phrase_ids = phrases.iter().map(|p| vocab.intern(p)).collect();

        let mut sources = vec![
            vocab.templates.system.clone(),
            vocab.templates.memory.clone(),
            vocab.templates.instruction_words.clone(),
        ];
        sources.extend(vocab.templates.actions.iter().flatten().cloned());
        for text in &sources {
            for w in split_words(text) {
                if w != "<instruction>" {
                    vocab.intern(w);
                }
            }
        }
        for s in ActionScheme::ALL {
            for a in Action::ALL {
                let ids = split_words(&vocab.templates.actions[s.index()][a.index()])
                    .into_iter()
                    .map(|w| vocab.index[w])
                    .collect();
                vocab.action_ids[s.index()][a.index()] = ids;
            }
        }
        vocab
    }

    fn intern(&mut self, word: &str) -> TokenId {
        if let Some(&id) = self.index.get(word) {
            return id;
        }
        let id = TokenId(self.words.len() as u32);
        self.words.push(word.to_owned());
        self.index.insert(word.to_owned(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> TokenId {
        self.index.get(word).copied().unwrap_or(TokenId::UNKNOWN)
    }

    pub fn text(&self, id: TokenId) -> &str {
        self.words.get(id.index()).map(String::as_str).unwrap_or("<unk>")
    }

    /// Tokenizes free text as prompt tokens; out-of-vocabulary words map to `<unk>`.
    pub fn encode_text(&self, text: &str) -> Vec<Token> {
        split_words(text).into_iter().map(|w| Token::prompt(self.id(w))).collect()
    }

    pub fn turn_phrases(&self) -> &[String] {
        &self.templates.turn_phrases
    }

    /// Token ids spelling `action` under `scheme`.
    pub fn action_phrase(&self, action: Action, scheme: ActionScheme) -> &[TokenId] {
        &self.action_ids[scheme.index()][action.index()]
    }

    /// Every token id that can appear in a `scheme` action phrase.
    pub fn action_vocabulary(&self, scheme: ActionScheme) -> Vec<TokenId> {
        let mut ids: Vec<TokenId> = self.action_ids[scheme.index()].iter().flatten().copied().collect();
        ids.sort();
        ids.dedup();
        ids
    }

    /// Joins token texts with single spaces; patches render as `<patch>`.
    pub fn render(&self, tokens: &[Token]) -> String {
        tokens.iter().map(|t| self.text(t.id)).collect::<Vec<_>>().join(" ")
    }
}

pub fn encode_actions(actions: &[Action], scheme: ActionScheme) -> Vec<Token> {
    let v = vocab();
    actions
        .iter()
        .flat_map(|&a| v.action_phrase(a, scheme).iter().map(|&id| Token::action(id)))
        .collect()
}

pub fn decode_actions(tokens: &[Token], scheme: ActionScheme) -> Result<Vec<Action>, TokenError> {
    let mut matcher = PhraseMatcher::new(scheme);
    let mut out = Vec::new();
    for (index, tok) in tokens.iter().enumerate() {
        if tok.role != TokenRole::ActionTok {
            return Err(TokenError::UnknownToken { index, id: tok.id, scheme });
        }
        match matcher.push(tok.id) {
            Some(Ok(action)) => out.push(action),
            Some(Err(())) => return Err(TokenError::UnknownToken { index, id: tok.id, scheme }),
            None => {}
        }
    }
    if matcher.in_progress() {
        return Err(TokenError::IncompletePhrase { scheme });
    }
    Ok(out)
}

/// Incremental prefix matcher over a scheme's action phrases, used for
/// vocabulary-constrained generation.
#[derive(Debug, Clone)]
pub struct PhraseMatcher {
    scheme: ActionScheme,
    partial: Vec<TokenId>,
}

impl PhraseMatcher {
    pub fn new(scheme: ActionScheme) -> Self {
        PhraseMatcher { scheme, partial: Vec::new() }
    }

    pub fn in_progress(&self) -> bool {
        !self.partial.is_empty()
    }

    fn candidates(&self, allow_stop: bool) -> impl Iterator<Item = (Action, &[TokenId])> + '_ {
        let v = vocab();
        Action::ALL
            .into_iter()
            .filter(move |&a| allow_stop || a != Action::Stop)
            .map(move |a| (a, v.action_phrase(a, self.scheme)))
            .filter(|(_, phrase)| phrase.starts_with(&self.partial))
    }

    /// Token ids that extend the current partial phrase.
    pub fn allowed(&self, allow_stop: bool) -> Vec<TokenId> {
        let n = self.partial.len();
        let mut ids: Vec<TokenId> = self.candidates(allow_stop).map(|(_, p)| p[n]).collect();
        ids.sort();
        ids.dedup();
        ids
    }

    /// Feeds one token. Returns `Some(Ok(action))` when a phrase completes,
    /// `Some(Err(()))` when the token cannot continue any phrase.
    pub fn push(&mut self, id: TokenId) -> Option<Result<Action, ()>> {
        self.partial.push(id);
        let mut any = false;
        let mut done = None;
        for (action, phrase) in self.candidates(true) {
            any = true;
            if phrase.len() == self.partial.len() {
                done = Some(action);
            }
        }
        if !any {
            self.partial.clear();
            return Some(Err(()));
        }
        if let Some(action) = done {
            self.partial.clear();
            return Some(Ok(action));
        }
        None
    }
}

/// System prompt for a session, with the historical-observations clause after
/// the first session when memory exists.
pub fn build_session_prompt(instruction: &str, session_index: usize, memory_present: bool) -> Vec<Token> {
    let v = vocab();
    let mut out = Vec::new();
    for w in split_words(&v.templates.system) {
        if w == "<instruction>" {
            out.extend(v.encode_text(instruction));
        } else {
            out.push(Token::prompt(v.id(w)));
        }
    }
    if session_index > 0 && memory_present {
        for w in split_words(&v.templates.memory) {
            if w == "<memory>" {
                out.push(Token::memory_slot());
            } else {
                out.push(Token::prompt(v.id(w)));
            }
        }
    }
    out
}

/// Observation-introducing phrase for a turn followed by the image slot.
pub fn build_turn_prefix(turn_index: usize) -> Vec<Token> {
    let v = vocab();
    let phrase = v.phrase_ids[turn_index % v.phrase_ids.len()];
    vec![Token::prompt(phrase), Token::prompt(TokenId::IMAGE_SLOT)]
}
