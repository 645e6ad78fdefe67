//! Built-in English word list for synthetic corpora.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[rustfmt::skip]
pub const WORDS: &[&str] = &[
    "about", "above", "actor", "adult", "after", "again", "agent", "alarm", "album", "alive",
    "angle", "animal", "answer", "apple", "april", "arena", "armor", "arrow", "artist", "autumn",
    "bacon", "badge", "baker", "banana", "basket", "beach", "beard", "berry", "bicycle", "black",
    "blade", "blanket", "blood", "board", "bottle", "bottom", "brain", "bread", "bridge", "bright",
    "brown", "bucket", "butter", "button", "cabin", "cable", "camera", "candle", "canvas", "carbon",
    "carpet", "castle", "chair", "chalk", "cheese", "cherry", "chess", "church", "circle", "city",
    "clock", "cloud", "coast", "coffee", "copper", "corner", "cotton", "cream", "crown", "dance",
    "danger", "desert", "dinner", "doctor", "dollar", "dragon", "drawer", "dream", "drive", "eagle",
    "earth", "eight", "empire", "energy", "engine", "entry", "falcon", "family", "farmer", "fence",
    "field", "finger", "flame", "flower", "forest", "fossil", "frame", "friend", "frost", "fruit",
    "galaxy", "garden", "ghost", "giant", "ginger", "glass", "globe", "glove", "golden", "grape",
    "grass", "guitar", "hammer", "harbor", "heart", "helmet", "honey", "horse", "hotel", "house",
    "hunter", "island", "ivory", "jacket", "jewel", "joker", "juice", "jungle", "kettle", "king",
    "kitchen", "knife", "ladder", "lake", "lemon", "letter", "light", "lion", "lizard", "lunch",
    "magnet", "mango", "marble", "market", "meadow", "metal", "mirror", "monkey", "month", "motor",
    "mountain", "mouse", "music", "needle", "night", "noble", "north", "number", "ocean", "office",
    "olive", "orange", "orbit", "oven", "paint", "palace", "panda", "paper", "parrot", "party",
    "pencil", "pepper", "piano", "pilot", "planet", "plate", "pocket", "poem", "potato", "power",
    "prince", "puzzle", "queen", "quick", "rabbit", "radio", "rain", "record", "river", "robot",
    "rocket", "round", "royal", "ruler", "saddle", "salad", "salt", "school", "screen", "secret",
    "seven", "shadow", "shell", "shirt", "silver", "singer", "sister", "smile", "snake", "socks",
    "spider", "spoon", "sports", "square", "stamp", "station", "stone", "storm", "street", "sugar",
    "summer", "sunset", "sweet", "table", "tiger", "timber", "toast", "tomato", "tower", "train",
    "travel", "tunnel", "turtle", "uncle", "union", "valley", "velvet", "violet", "visitor", "voice",
    "wagon", "walnut", "water", "whale", "wheel", "window", "winter", "wizard", "wolf", "yellow",
    "zebra", "zero", "cat", "dog", "sun", "map", "cup", "box", "key", "pen",
    "hat", "bus", "owl", "fox", "egg", "ice", "jam", "log", "net", "oak",
];

/// `n` distinct words drawn by a seeded shuffle of [`WORDS`] (all of them when `n` exceeds the list).
pub fn sample_words(n: usize, seed: u64) -> Vec<String> {
    let mut words: Vec<&str> = WORDS.to_vec();
    words.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    words.into_iter().take(n).map(str::to_string).collect()
}

/// Positions at which two words differ once padded to a common length.
pub fn padded_distance(a: &str, b: &str) -> usize {
    let (a, b) = (a.as_bytes(), b.as_bytes());
    (0..a.len().max(b.len())).filter(|&i| a.get(i) != b.get(i)).count()
}

/// Greedily picks up to `n` words from [`WORDS`] that fit `max_chars` and stay at
/// padded distance at least `min_distance` from every word already taken.
pub fn distinct_words(n: usize, max_chars: usize, min_distance: usize) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for w in WORDS {
        if out.len() == n {
            break;
        }
        if w.len() <= max_chars && out.iter().all(|o| padded_distance(o, w) >= min_distance) {
            out.push(w.to_string());
        }
    }
    out
}
