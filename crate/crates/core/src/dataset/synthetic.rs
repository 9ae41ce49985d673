//! Procedural person videos with attribute-level captions.
//!
//! A scene is a figure with a head (carrying a facing marker), a torso band
//! and a legs band, drawn over a noisy background and executing a program of
//! motion primitives. Two captions per scene come from different paraphrase
//! templates; both state the colors, the primitives in order and whether the
//! legs are occluded.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::frames::{write_png_frames, write_raw_frames, FrameStack};
use super::manifest::{write_manifest, ManifestEntry};
use super::Sample;
use crate::clip::VideoClip;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    White,
    Black,
}

impl Color {
    pub const PALETTE: [Color; 6] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::White,
        Color::Black,
    ];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::White => "white",
            Color::Black => "black",
        }
    }

    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [220, 30, 30],
            Color::Green => [30, 180, 40],
            Color::Blue => [30, 60, 220],
            Color::Yellow => [235, 215, 30],
            Color::White => [245, 245, 245],
            Color::Black => [15, 15, 15],
        }
    }

    fn from_word(w: &str) -> Option<Self> {
        Self::PALETTE.into_iter().find(|c| c.word() == w)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Primitive {
    WalkLeft,
    WalkRight,
    Pause,
    Turn,
    ApproachOther,
}

impl Primitive {
    pub const ALL: [Primitive; 5] = [
        Primitive::WalkLeft,
        Primitive::WalkRight,
        Primitive::Pause,
        Primitive::Turn,
        Primitive::ApproachOther,
    ];

    /// Phrase used by the first template.
    fn phrase(self) -> &'static str {
        match self {
            Primitive::WalkLeft => "walks to the left",
            Primitive::WalkRight => "walks to the right",
            Primitive::Pause => "stands still",
            Primitive::Turn => "turns around",
            Primitive::ApproachOther => "approaches another person",
        }
    }

    /// Phrase used by the second template.
    fn paraphrase(self) -> &'static str {
        match self {
            Primitive::WalkLeft => "moves leftward",
            Primitive::WalkRight => "moves rightward",
            Primitive::Pause => "pauses",
            Primitive::Turn => "turns back",
            Primitive::ApproachOther => "walks up to someone",
        }
    }

    fn code(self) -> char {
        match self {
            Primitive::WalkLeft => 'L',
            Primitive::WalkRight => 'R',
            Primitive::Pause => 'P',
            Primitive::Turn => 'T',
            Primitive::ApproachOther => 'A',
        }
    }
}

/// Frames `start..end` in which the legs band is hidden behind a box.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Occlusion {
    pub start_frame: usize,
    pub end_frame: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub torso_color: Color,
    pub legs_color: Color,
    pub motion_program: Vec<Primitive>,
    pub occlusion: Option<Occlusion>,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

/// Attribute tuple that defines an identity.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Identity {
    pub torso_color: Color,
    pub legs_color: Color,
    pub motion_program: Vec<Primitive>,
    pub occluded: bool,
}

impl Identity {
    pub fn id(&self) -> String {
        let program: String = self.motion_program.iter().map(|p| p.code()).collect();
        format!(
            "{}-{}-{}{}",
            self.torso_color.word(),
            self.legs_color.word(),
            program,
            if self.occluded { "-occ" } else { "" }
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub fps: f64,
    pub torso_colors: Vec<Color>,
    pub legs_colors: Vec<Color>,
    pub programs: Vec<Vec<Primitive>>,
    /// include identities with an occluded legs band
    pub occlusion: bool,
    /// amplitude of the background noise, in 8-bit levels
    pub noise: u8,
    pub num_videos: usize,
    /// sample identities with replacement
    pub allow_repeats: bool,
    pub seed: u64,
    pub sub_dataset: String,
    /// store frames as PNG files (otherwise one raw blob per clip)
    pub png: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            frames: 16,
            height: 32,
            width: 32,
            fps: 4.0,
            torso_colors: Color::PALETTE.to_vec(),
            legs_colors: Color::PALETTE.to_vec(),
            programs: default_programs(),
            occlusion: true,
            noise: 12,
            num_videos: 160,
            allow_repeats: false,
            seed: 0,
            sub_dataset: "synthetic".into(),
            png: true,
        }
    }
}

/// Five single-phrase and compound programs.
pub fn default_programs() -> Vec<Vec<Primitive>> {
    use Primitive::*;
    vec![
        vec![WalkLeft],
        vec![WalkRight],
        vec![Pause, WalkRight],
        vec![WalkLeft, Turn, WalkRight],
        vec![ApproachOther],
    ]
}

/// Every ordered pair of distinct primitives (20 programs).
pub fn two_step_programs() -> Vec<Vec<Primitive>> {
    let mut out = Vec::new();
    for a in Primitive::ALL {
        for b in Primitive::ALL {
            if a != b {
                out.push(vec![a, b]);
            }
        }
    }
    out
}

impl GeneratorConfig {
    /// Colors fixed to one torso and one legs color, no occlusion and the
    /// two-step programs, so only motion tells identities apart.
    pub fn motion_only_corpus() -> Self {
        Self {
            torso_colors: vec![Color::Red],
            legs_colors: vec![Color::Blue],
            programs: two_step_programs(),
            occlusion: false,
            allow_repeats: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.torso_colors.is_empty() || self.legs_colors.is_empty() {
            return Err(Error::config("generator palette is empty"));
        }
        if self.programs.is_empty() || self.programs.iter().any(Vec::is_empty) {
            return Err(Error::config("generator needs at least one nonempty motion program"));
        }
        if self.frames < 2 || self.height < 16 || self.width < 16 {
            return Err(Error::config("generator needs at least 2 frames of at least 16x16 pixels"));
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return Err(Error::config(format!("invalid frame rate {}", self.fps)));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = crate::config::read(path)?;
        let mut cfg: Self = toml::from_str(&text).map_err(|e| Error::format("generator config", e.to_string()))?;
        if let Some(seed) = crate::config::seed_override()? {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every identity the configuration can produce, in a fixed order.
    pub fn identities(&self) -> Vec<Identity> {
        let occ: &[bool] = if self.occlusion { &[false, true] } else { &[false] };
        let mut out = BTreeSet::new();
        for &torso_color in &self.torso_colors {
            for &legs_color in &self.legs_colors {
                for program in &self.programs {
                    for &occluded in occ {
                        out.insert(Identity {
                            torso_color,
                            legs_color,
                            motion_program: program.clone(),
                            occluded,
                        });
                    }
                }
            }
        }
        out.into_iter().collect()
    }
}

fn join_phrases(program: &[Primitive], phrase: fn(Primitive) -> &'static str, sep: &str) -> String {
    program.iter().map(|&p| phrase(p)).collect::<Vec<_>>().join(sep)
}

/// The two captions of a scene.
pub fn captions(scene: &SyntheticScene) -> [String; 2] {
    let (t, l) = (scene.torso_color.word(), scene.legs_color.word());
    let occluded = scene.occlusion.is_some();
    let first = format!(
        "a person in a {t} top and {l} trousers {}{}.",
        join_phrases(&scene.motion_program, Primitive::phrase, " then "),
        if occluded { ", partly hidden behind an obstacle" } else { "" }
    );
    let second = format!(
        "someone wearing {l} pants and a {t} shirt {}{}.",
        join_phrases(&scene.motion_program, Primitive::paraphrase, " and then "),
        if occluded { " while partially occluded" } else { "" }
    );
    [first, second]
}

/// Recovers the identity from either caption template.
pub fn parse_caption(text: &str) -> Option<Identity> {
    let text = text.strip_suffix('.')?;
    let (torso, legs, motion, occluded, phrase, sep): (_, _, _, _, fn(Primitive) -> &'static str, _) =
        if let Some(r) = text.strip_prefix("a person in a ") {
            let (r, occ) = strip_clause(r, ", partly hidden behind an obstacle");
            let (torso, r) = r.split_once(" top and ")?;
            let (legs, motion) = r.split_once(" trousers ")?;
            (torso, legs, motion, occ, Primitive::phrase, " then ")
        } else {
            let r = text.strip_prefix("someone wearing ")?;
            let (r, occ) = strip_clause(r, " while partially occluded");
            let (legs, r) = r.split_once(" pants and a ")?;
            let (torso, motion) = r.split_once(" shirt ")?;
            (torso, legs, motion, occ, Primitive::paraphrase, " and then ")
        };
    let motion_program = motion
        .split(sep)
        .map(|chunk| Primitive::ALL.into_iter().find(|&p| phrase(p) == chunk))
        .collect::<Option<Vec<_>>>()?;
    Some(Identity {
        torso_color: Color::from_word(torso)?,
        legs_color: Color::from_word(legs)?,
        motion_program,
        occluded,
    })
}

fn strip_clause<'a>(text: &'a str, clause: &str) -> (&'a str, bool) {
    match text.strip_suffix(clause) {
        Some(r) => (r, true),
        None => (text, false),
    }
}

const SKIN: [u8; 3] = [230, 190, 150];
const OTHER: [u8; 3] = [70, 70, 70];
const OCCLUDER: [u8; 3] = [110, 70, 30];

/// Per-frame figure state.
#[derive(Clone, Copy, Debug)]
struct Pose {
    x: f64,
    facing_right: bool,
    walking: bool,
    step: usize,
    other_x: Option<f64>,
}

struct Layout {
    fig_w: usize,
    head: (usize, usize),
    torso: (usize, usize),
    legs: (usize, usize),
    speed: f64,
}

fn layout(h: usize, w: usize, frames: usize) -> Layout {
    let fig_h = (h * 3) / 4;
    let top = (h - fig_h) / 2;
    let head_h = (fig_h / 5).max(2);
    let torso_h = (fig_h * 2) / 5;
    let legs_h = fig_h - head_h - torso_h;
    Layout {
        fig_w: (w / 5).max(4),
        head: (top, top + head_h),
        torso: (top + head_h, top + head_h + torso_h),
        legs: (top + head_h + torso_h, top + head_h + torso_h + legs_h),
        speed: (w as f64 * 0.6 / frames as f64).max(0.5),
    }
}

/// Splits `frames` into one contiguous segment per primitive.
fn segments(frames: usize, n: usize) -> Vec<(usize, usize)> {
    (0..n).map(|i| (i * frames / n, (i + 1) * frames / n)).collect()
}

fn poses(scene: &SyntheticScene, lay: &Layout, rng: &mut ChaCha8Rng) -> Vec<Pose> {
    let t = scene.frames;
    let mut poses = Vec::with_capacity(t);
    let first_dir = scene.motion_program.iter().find_map(|p| match p {
        Primitive::WalkLeft => Some(false),
        Primitive::WalkRight => Some(true),
        _ => None,
    });
    let mut pose = Pose {
        x: 0.0,
        facing_right: first_dir.unwrap_or_else(|| rng.gen()),
        walking: false,
        step: 0,
        other_x: None,
    };
    let gap = lay.fig_w as f64 + 2.0;
    for (&prim, (s, e)) in scene.motion_program.iter().zip(segments(t, scene.motion_program.len())) {
        let len = e - s;
        if prim == Primitive::ApproachOther {
            let dir = if pose.facing_right { 1.0 } else { -1.0 };
            pose.other_x = Some(pose.x + dir * (gap + lay.speed * len as f64));
        }
        for k in 0..len {
            match prim {
                Primitive::WalkLeft | Primitive::WalkRight => {
                    pose.facing_right = prim == Primitive::WalkRight;
                    pose.walking = true;
                    pose.x += if pose.facing_right { lay.speed } else { -lay.speed };
                    pose.step += 1;
                }
                Primitive::Pause => pose.walking = false,
                Primitive::Turn => {
                    pose.walking = false;
                    if k == len / 2 {
                        pose.facing_right = !pose.facing_right;
                    }
                }
                Primitive::ApproachOther => {
                    pose.walking = true;
                    pose.x += if pose.facing_right { lay.speed } else { -lay.speed };
                    pose.step += 1;
                }
            }
            poses.push(pose);
        }
    }
    // shift the whole path so every figure stays inside the frame
    let xs = poses.iter().flat_map(|p| std::iter::once(p.x).chain(p.other_x));
    let (lo, hi) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    let room = scene.width as f64 - lay.fig_w as f64 - (hi - lo);
    let offset = -lo + if room > 0.0 { rng.gen_range(0.0..=room) } else { room / 2.0 };
    for p in &mut poses {
        p.x += offset;
        if let Some(o) = &mut p.other_x {
            *o += offset;
        }
    }
    poses
}

fn fill(frame: &mut [u8], h: usize, w: usize, rows: (usize, usize), cols: (isize, isize), rgb: [u8; 3]) {
    for y in rows.0..rows.1.min(h) {
        for x in cols.0.max(0)..cols.1.min(w as isize) {
            for (c, &v) in rgb.iter().enumerate() {
                frame[(c * h + y) * w + x as usize] = v;
            }
        }
    }
}

fn draw_figure(frame: &mut [u8], scene: &SyntheticScene, lay: &Layout, x: isize, pose: Option<&Pose>) {
    let (h, w) = (scene.height, scene.width);
    let fw = lay.fig_w as isize;
    let Some(pose) = pose else {
        // the other person: a plain gray silhouette
        fill(frame, h, w, (lay.head.0, lay.legs.1), (x, x + fw), OTHER);
        return;
    };
    let inset = fw / 4;
    fill(frame, h, w, lay.head, (x + inset, x + fw - inset), SKIN);
    let eye_x = if pose.facing_right { x + fw - inset - 1 } else { x + inset };
    let eye_y = (lay.head.0 + lay.head.1) / 2;
    fill(frame, h, w, (eye_y, eye_y + 1), (eye_x, eye_x + 1), [0, 0, 0]);
    fill(frame, h, w, lay.torso, (x, x + fw), scene.torso_color.rgb());
    // an arm held out on the facing side
    let arm_y = lay.torso.0 + (lay.torso.1 - lay.torso.0) / 3;
    let arm_x = if pose.facing_right { x + fw } else { x - 2 };
    fill(frame, h, w, (arm_y, arm_y + 2), (arm_x, arm_x + 2), SKIN);
    let legs = scene.legs_color.rgb();
    if pose.walking && pose.step % 2 == 1 {
        // stride: legs apart
        let leg = (fw / 3).max(1);
        fill(frame, h, w, lay.legs, (x - 1, x - 1 + leg), legs);
        fill(frame, h, w, lay.legs, (x + fw + 1 - leg, x + fw + 1), legs);
    } else {
        fill(frame, h, w, lay.legs, (x + inset / 2, x + fw - inset / 2), legs);
    }
}

/// Renders a scene; `seed` drives the background, start position and the
/// facing direction where the program leaves it open.
pub fn render(scene: &SyntheticScene, seed: u64, noise: u8) -> Result<FrameStack> {
    let (t, h, w) = (scene.frames, scene.height, scene.width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lay = layout(h, w, t);
    let base: Vec<u8> = (0..3 * h * w)
        .map(|_| 128u8.saturating_add_signed(rng.gen_range(-(noise as i16)..=noise as i16).clamp(-127, 127) as i8))
        .collect();
    let poses = poses(scene, &lay, &mut rng);
    let mut data = Vec::with_capacity(t * 3 * h * w);
    for (k, pose) in poses.iter().enumerate() {
        let mut frame = base.clone();
        if let Some(ox) = pose.other_x {
            draw_figure(&mut frame, scene, &lay, ox.round() as isize, None);
        }
        draw_figure(&mut frame, scene, &lay, pose.x.round() as isize, Some(pose));
        if let Some(o) = scene.occlusion {
            if (o.start_frame..o.end_frame).contains(&k) {
                fill(&mut frame, h, w, lay.legs, (0, w as isize), OCCLUDER);
            }
        }
        data.extend_from_slice(&frame);
    }
    FrameStack::new(t, h, w, data)
}

/// A generated clip with its manifest entry and ground truth.
#[derive(Clone, Debug)]
pub struct GeneratedVideo {
    pub scene: SyntheticScene,
    pub identity: Identity,
    pub frames: FrameStack,
    pub entry: ManifestEntry,
}

impl GeneratedVideo {
    pub fn clip(&self) -> Result<VideoClip> {
        VideoClip::at_fps(
            self.frames.to_array(),
            self.entry.fps.unwrap_or(super::manifest::DEFAULT_FPS),
            self.entry.clip_id.clone(),
        )
    }

    /// The clip at its full length with its captions.
    pub fn sample(&self) -> Result<Sample> {
        Sample::new(self.clip()?, &self.entry.captions, self.frames.frames)
    }
}

/// Builds the scene of an identity; the occlusion window (when occluded)
/// covers a seeded half of the clip.
pub fn scene_for(identity: &Identity, cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> SyntheticScene {
    let occlusion = identity.occluded.then(|| {
        let len = cfg.frames.div_ceil(2);
        let start = rng.gen_range(0..=cfg.frames - len);
        Occlusion {
            start_frame: start,
            end_frame: start + len,
        }
    });
    SyntheticScene {
        torso_color: identity.torso_color,
        legs_color: identity.legs_color,
        motion_program: identity.motion_program.clone(),
        occlusion,
        frames: cfg.frames,
        height: cfg.height,
        width: cfg.width,
    }
}

/// Renders one scene into a clip and its manifest entry.
pub fn generate_scene(
    scene: &SyntheticScene,
    seed: u64,
    clip_id: &str,
    cfg: &GeneratorConfig,
) -> Result<GeneratedVideo> {
    if scene.motion_program.is_empty() {
        return Err(Error::config("motion program is empty"));
    }
    let frames = render(scene, seed, cfg.noise)?;
    let identity = Identity {
        torso_color: scene.torso_color,
        legs_color: scene.legs_color,
        motion_program: scene.motion_program.clone(),
        occluded: scene.occlusion.is_some(),
    };
    let entry = ManifestEntry {
        clip_id: clip_id.to_string(),
        frames_path: format!("frames/{clip_id}{}", if cfg.png { "" } else { ".raw" }),
        captions: captions(scene).to_vec(),
        identity_id: identity.id(),
        sub_dataset: cfg.sub_dataset.clone(),
        fps: Some(cfg.fps),
    };
    Ok(GeneratedVideo {
        scene: scene.clone(),
        identity,
        frames,
        entry,
    })
}

/// Generates `cfg.num_videos` clips. Identities are drawn without
/// replacement unless repeats are allowed; every clip has its own seed
/// derived from the corpus seed and its index.
pub fn generate_corpus(cfg: &GeneratorConfig) -> Result<Vec<GeneratedVideo>> {
    cfg.validate()?;
    let pool = cfg.identities();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let chosen: Vec<Identity> = if cfg.allow_repeats {
        (0..cfg.num_videos).map(|i| pool[i % pool.len()].clone()).collect::<Vec<_>>()
    } else {
        if cfg.num_videos > pool.len() {
            return Err(Error::config(format!(
                "{} videos requested but only {} distinct identities exist; allow repeats or shrink the corpus",
                cfg.num_videos,
                pool.len()
            )));
        }
        pool.choose_multiple(&mut rng, cfg.num_videos).cloned().collect()
    };
    let mut chosen = chosen;
    if cfg.allow_repeats {
        chosen.shuffle(&mut rng);
    }
    chosen
        .iter()
        .enumerate()
        .map(|(i, identity)| {
            let clip_seed = cfg.seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
            let mut srng = ChaCha8Rng::seed_from_u64(clip_seed ^ 0x9e37_79b9_7f4a_7c15);
            let scene = scene_for(identity, cfg, &mut srng);
            generate_scene(&scene, clip_seed, &format!("{}{i:05}", clip_prefix(cfg)), cfg)
        })
        .collect()
}

fn clip_prefix(cfg: &GeneratorConfig) -> String {
    format!("{}_", cfg.sub_dataset)
}

/// Writes frames and `manifest.jsonl` under `out`; returns the manifest path.
pub fn write_corpus(out: &Path, videos: &[GeneratedVideo], png: bool) -> Result<std::path::PathBuf> {
    let frames_dir = out.join("frames");
    std::fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
    for v in videos {
        let path = out.join(&v.entry.frames_path);
        if png {
            write_png_frames(&path, &v.frames)?;
        } else {
            write_raw_frames(&path, &v.frames)?;
        }
    }
    let manifest = out.join("manifest.jsonl");
    let entries: Vec<ManifestEntry> = videos.iter().map(|v| v.entry.clone()).collect();
    write_manifest(&manifest, &entries)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_pool_size() {
        assert_eq!(GeneratorConfig::default().identities().len(), 360);
        assert_eq!(GeneratorConfig::motion_only_corpus().identities().len(), 20);
    }

    #[test]
    fn captions_round_trip() {
        let cfg = GeneratorConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for id in cfg.identities() {
            let scene = scene_for(&id, &cfg, &mut rng);
            for c in captions(&scene) {
                assert_eq!(parse_caption(&c).as_ref(), Some(&id), "{c}");
            }
        }
    }

    #[test]
    fn all_captions_distinct() {
        let cfg = GeneratorConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut seen = BTreeSet::new();
        for id in cfg.identities() {
            let [a, b] = captions(&scene_for(&id, &cfg, &mut rng));
            assert_ne!(a, b);
            assert!(seen.insert(a) && seen.insert(b));
        }
    }
}
