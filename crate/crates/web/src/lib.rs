//! Browser demo: foveated blending of ray-traced layer images under a
//! mouse-driven gaze, the sphere-count precision explorer, and blend weights.

use fovnerf_core::compositor::{blend_eye, blend_weights, eccentricity_map, DisplaySpec};
use fovnerf_core::datagen::{render_reference, ProceduralScene};
use fovnerf_core::foveation::{layer_camera, ElementalImage, ElementalImageSet, Eye, LayerSet, StereoMode, StereoRig};
use fovnerf_core::math::{Mat3, Vec3};
use fovnerf_core::optimizer::{e_image, random_cameras, surface_points};
use fovnerf_core::sphgeom::ConcentricGrid;
use wasm_bindgen::prelude::*;

// plain strings so errors can be built off the wasm target too
fn js(e: fovnerf_core::Error) -> String {
    e.to_string()
}

#[wasm_bindgen]
pub struct FoveatedView {
    scene: ProceduralScene,
    display: DisplaySpec,
    layers: LayerSet,
}

#[wasm_bindgen]
impl FoveatedView {
    #[wasm_bindgen(constructor)]
    pub fn new(scene: &str, width: usize, height: usize, layer_scale: f64) -> Result<FoveatedView, String> {
        if width == 0 || height == 0 || !(layer_scale > 0.0) {
            return Err("display size and layer scale must be positive".to_string());
        }
        Ok(FoveatedView {
            scene: ProceduralScene::preset(scene).map_err(js)?,
            display: DisplaySpec {
                width,
                height,
                ..DisplaySpec::default()
            },
            layers: LayerSet::default().scaled(layer_scale),
        })
    }

    pub fn width(&self) -> usize {
        self.display.width
    }

    pub fn height(&self) -> usize {
        self.display.height
    }

    fn rig(&self, u: f64, v: f64) -> Result<StereoRig, String> {
        let head = StereoRig {
            ipd: 0.0,
            ..StereoRig::default()
        };
        let cam = self.display.camera(&head, Eye::Central).map_err(js)?;
        let gaze = cam.direction_at(u * self.display.width as f64, v * self.display.height as f64);
        StereoRig::new(Vec3::ZERO, Mat3::IDENTITY, 0.0, gaze).map_err(js)
    }

    /// RGBA display image with the gaze at normalized display coordinates.
    pub fn render(&self, u: f64, v: f64) -> Result<Vec<u8>, String> {
        let rig = self.rig(u, v)?;
        let mut images = Vec::new();
        for (tag, eye) in StereoMode::Mono.passes() {
            let (camera, _) = layer_camera(self.layers.get(tag), &rig, eye).map_err(js)?;
            let (img, depth) = render_reference(&self.scene, &camera);
            let n = camera.n_pixels();
            images.push(ElementalImage {
                tag,
                eye,
                camera,
                color: (0..n).map(|i| img.get(i % img.width, i / img.width)).collect(),
                depth: depth.data,
                alpha: vec![1.0; n],
            });
        }
        let set = ElementalImageSet {
            mode: StereoMode::Mono,
            rig,
            images,
            gaze_clamped: false,
        };
        let out = blend_eye(&set, &self.layers, &self.display, Eye::Central, f64::INFINITY).map_err(js)?;
        Ok(out.to_rgba8())
    }

    /// RGBA map of the fovea, mid and far weights in the red, green and blue channels.
    pub fn weights(&self, u: f64, v: f64) -> Result<Vec<u8>, String> {
        let rig = self.rig(u, v)?;
        let ecc = eccentricity_map(&self.display, &rig, Eye::Central).map_err(js)?;
        let mut out = Vec::with_capacity(ecc.len() * 4);
        for theta in ecc {
            let w = blend_weights(&self.layers, theta);
            out.extend(w.map(|x| (x * 255.0).round() as u8));
            out.push(255);
        }
        Ok(out)
    }
}

/// Fovea, mid and far weights at an eccentricity in degrees.
#[wasm_bindgen]
pub fn layer_weights(theta_deg: f64) -> Vec<f64> {
    blend_weights(&LayerSet::default(), theta_deg).to_vec()
}

/// Mean and standard error of the projected pixel error for a grid of
/// `n_spheres` uniform spheres over the scene.
#[wasm_bindgen]
pub fn image_error(scene: &str, n_spheres: usize, points: usize, seed: u64) -> Result<Vec<f64>, String> {
    let scene = ProceduralScene::preset(scene).map_err(js)?;
    let (near, far) = scene.radius_bounds(1024);
    let grid = ConcentricGrid::uniform(n_spheres, near, far).map_err(js)?;
    let cameras = random_cameras(&scene, 4, 20.0, 128, 128, seed).map_err(js)?;
    let pts = surface_points(&scene, points, seed);
    let err = e_image(&grid, &cameras, &pts).map_err(js)?;
    Ok(vec![err.pooled.mean, err.pooled.stderr])
}
