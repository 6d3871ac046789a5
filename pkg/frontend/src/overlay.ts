/** Coordinate mapping between the displayed canvas and image space, plus
 *  window-rectangle clipping for drawing. Probe coordinates always live in
 *  image space; pan/zoom only changes the view transform. */

import type { WindowGeometry } from "./types.js";

export interface ViewTransform {
  scale: number; // canvas pixels per image pixel
  offsetX: number;
  offsetY: number;
}

export interface Point {
  x: number;
  y: number;
}

export interface Rect {
  x: number;
  y: number;
  width: number;
  height: number;
}

export function canvasToImage(p: Point, view: ViewTransform): Point {
  return {
    x: (p.x - view.offsetX) / view.scale,
    y: (p.y - view.offsetY) / view.scale,
  };
}

export function imageToCanvas(p: Point, view: ViewTransform): Point {
  return {
    x: p.x * view.scale + view.offsetX,
    y: p.y * view.scale + view.offsetY,
  };
}

export function insideImage(p: Point, width: number, height: number): boolean {
  return p.x >= 0 && p.y >= 0 && p.x < width && p.y < height;
}

/** Clip the nominal (possibly off-canvas) window square to the image. */
export function clipWindowRect(
  window: WindowGeometry,
  imageWidth: number,
  imageHeight: number,
): Rect {
  const x0 = Math.max(0, window.x);
  const y0 = Math.max(0, window.y);
  const x1 = Math.min(imageWidth, window.x + window.size);
  const y1 = Math.min(imageHeight, window.y + window.size);
  return { x: x0, y: y0, width: Math.max(0, x1 - x0), height: Math.max(0, y1 - y0) };
}

/** Fit-to-canvas view: image shown at native aspect, centered. */
export function fitView(
  imageWidth: number,
  imageHeight: number,
  canvasWidth: number,
  canvasHeight: number,
): ViewTransform {
  const scale = Math.min(canvasWidth / imageWidth, canvasHeight / imageHeight);
  return {
    scale,
    offsetX: (canvasWidth - imageWidth * scale) / 2,
    offsetY: (canvasHeight - imageHeight * scale) / 2,
  };
}

export function zoomAt(view: ViewTransform, at: Point, factor: number): ViewTransform {
  const scale = view.scale * factor;
  return {
    scale,
    offsetX: at.x - (at.x - view.offsetX) * factor,
    offsetY: at.y - (at.y - view.offsetY) * factor,
  };
}
